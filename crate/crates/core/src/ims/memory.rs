use async_trait::async_trait;
use parking_lot::RwLock;

use super::{select, BackendError, MessageQuery, StorageBackend, StoredMessage};
use crate::model::LogMessage;
use crate::time::Timestamp;

/// Messages kept in process memory; seq `n` lives at index `n - 1`.
#[derive(Debug, Default)]
pub struct MemoryBackend {
    messages: RwLock<Vec<StoredMessage>>,
}

impl MemoryBackend {
    pub fn new() -> Self {
        Self::default()
    }
}

#[async_trait]
impl StorageBackend for MemoryBackend {
    async fn append(
        &self,
        msg: LogMessage,
        received_at: Timestamp,
        instance_id: &str,
    ) -> Result<StoredMessage, BackendError> {
        let mut messages = self.messages.write();
        let stored = StoredMessage {
            seq: messages.len() as u64 + 1,
            msg,
            received_at,
            instance_id: instance_id.to_string(),
        };
        messages.push(stored.clone());
        Ok(stored)
    }

    async fn query(&self, q: &MessageQuery) -> Result<Vec<StoredMessage>, BackendError> {
        let compiled = q.validate()?;
        let messages = self.messages.read();
        let start = (q.after_seq as usize).min(messages.len());
        Ok(select(messages[start..].iter(), q, &compiled))
    }

    async fn count(&self) -> Result<u64, BackendError> {
        Ok(self.messages.read().len() as u64)
    }

    async fn last_seq(&self) -> Result<u64, BackendError> {
        self.count().await
    }
}
