use std::sync::Arc;

use async_trait::async_trait;
use parking_lot::Mutex;
use rcms_core::model::LogMessage;

use crate::clients::ImsClient;

/// Where services send their own monitor messages. Publishing is best
/// effort: failures are logged, never returned.
#[async_trait]
pub trait MessageSink: Send + Sync {
    async fn publish(&self, msg: LogMessage);
}

pub struct NullSink;

#[async_trait]
impl MessageSink for NullSink {
    async fn publish(&self, _msg: LogMessage) {}
}

/// Keeps everything in memory; used by tests and offline runs.
#[derive(Default)]
pub struct CollectingSink {
    messages: Mutex<Vec<LogMessage>>,
}

impl CollectingSink {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn messages(&self) -> Vec<LogMessage> {
        self.messages.lock().clone()
    }
}

#[async_trait]
impl MessageSink for CollectingSink {
    async fn publish(&self, msg: LogMessage) {
        self.messages.lock().push(msg);
    }
}

#[async_trait]
impl MessageSink for ImsClient {
    async fn publish(&self, msg: LogMessage) {
        let source = msg.source.clone();
        if let Err(e) = ImsClient::publish(self, msg).await {
            tracing::warn!(%source, "monitor publish failed: {e}");
        }
    }
}
