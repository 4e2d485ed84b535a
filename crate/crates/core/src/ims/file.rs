use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::PathBuf;

use async_trait::async_trait;
use parking_lot::Mutex;

use super::{select, BackendError, MessageQuery, StorageBackend, StoredMessage};
use crate::model::LogMessage;
use crate::time::Timestamp;
use crate::wire::{Body, Envelope, Kind};

/// Appends between fsyncs.
pub const SYNC_BATCH: usize = 64;

struct Inner {
    writer: BufWriter<File>,
    unsynced: usize,
    messages: Vec<StoredMessage>,
}

/// Flat-file store: one canonical event envelope per line, replayed into
/// memory on open. Lines are flushed to the OS on every append and fsynced
/// every [`SYNC_BATCH`] appends.
pub struct FileBackend {
    path: PathBuf,
    inner: Mutex<Inner>,
}

impl FileBackend {
    pub fn open(path: PathBuf) -> Result<Self, BackendError> {
        let mut messages = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (lineno, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let env = Envelope::decode(line.as_bytes())
                    .map_err(|e| BackendError::Corrupt(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
                match env.body {
                    Body::StoredMessage(m) if m.seq == messages.len() as u64 + 1 => messages.push(m),
                    _ => {
                        return Err(BackendError::Corrupt(format!(
                            "{}:{}: expected stored message #{}",
                            path.display(),
                            lineno + 1,
                            messages.len() + 1
                        )))
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            inner: Mutex::new(Inner {
                writer: BufWriter::new(file),
                unsynced: 0,
                messages,
            }),
        })
    }

    pub fn path(&self) -> &std::path::Path {
        &self.path
    }

    pub fn sync(&self) -> Result<(), BackendError> {
        let mut inner = self.inner.lock();
        inner.writer.flush()?;
        inner.writer.get_ref().sync_data()?;
        inner.unsynced = 0;
        Ok(())
    }
}

#[async_trait]
impl StorageBackend for FileBackend {
    async fn append(
        &self,
        msg: LogMessage,
        received_at: Timestamp,
        instance_id: &str,
    ) -> Result<StoredMessage, BackendError> {
        let mut inner = self.inner.lock();
        let stored = StoredMessage {
            seq: inner.messages.len() as u64 + 1,
            msg,
            received_at,
            instance_id: instance_id.to_string(),
        };
        let env = Envelope::new(Kind::Event, instance_id, "store", Body::StoredMessage(stored.clone()));
        let mut line = env
            .encode()
            .map_err(|e| BackendError::Corrupt(e.to_string()))?;
        line.push(b'\n');
        inner.writer.write_all(&line)?;
        inner.writer.flush()?;
        inner.unsynced += 1;
        if inner.unsynced >= SYNC_BATCH {
            inner.writer.get_ref().sync_data()?;
            inner.unsynced = 0;
        }
        inner.messages.push(stored.clone());
        Ok(stored)
    }

    async fn query(&self, q: &MessageQuery) -> Result<Vec<StoredMessage>, BackendError> {
        let compiled = q.validate()?;
        let inner = self.inner.lock();
        let start = (q.after_seq as usize).min(inner.messages.len());
        Ok(select(inner.messages[start..].iter(), q, &compiled))
    }

    async fn count(&self) -> Result<u64, BackendError> {
        Ok(self.inner.lock().messages.len() as u64)
    }

    async fn last_seq(&self) -> Result<u64, BackendError> {
        self.count().await
    }
}

impl Drop for FileBackend {
    fn drop(&mut self) {
        let inner = self.inner.get_mut();
        let _ = inner.writer.flush();
        let _ = inner.writer.get_ref().sync_data();
    }
}
