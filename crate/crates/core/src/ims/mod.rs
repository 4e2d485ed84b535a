//! Monitor message catalogue: stored records, queries and storage backends.

mod criteria;
mod file;
mod memory;
mod sql;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::LogMessage;
use crate::time::Timestamp;

pub use criteria::{CompiledCriteria, Criteria, CriteriaError};
pub use file::FileBackend;
pub use memory::MemoryBackend;
pub use sql::SqlBackend;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredMessage {
    pub seq: u64,
    pub msg: LogMessage,
    pub received_at: Timestamp,
    pub instance_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageQuery {
    #[serde(default)]
    pub criteria: Criteria,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(default)]
    pub after_seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub until_seq: Option<u64>,
}

impl MessageQuery {
    pub fn new(criteria: Criteria) -> Self {
        Self {
            criteria,
            ..Default::default()
        }
    }

    pub fn limit(mut self, n: usize) -> Self {
        self.limit = Some(n);
        self
    }

    pub fn after(mut self, seq: u64) -> Self {
        self.after_seq = seq;
        self
    }

    pub fn validate(&self) -> Result<CompiledCriteria, CriteriaError> {
        if self.limit == Some(0) {
            return Err(CriteriaError::ZeroLimit);
        }
        self.criteria.compile()
    }

    pub(crate) fn in_range(&self, seq: u64) -> bool {
        seq > self.after_seq && self.until_seq.is_none_or(|u| seq <= u)
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("malformed criteria: {0}")]
    MalformedCriteria(#[from] CriteriaError),
    #[error("storage i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("database: {0}")]
    Sql(#[from] rusqlite::Error),
    #[error("corrupt store: {0}")]
    Corrupt(String),
}

/// A message store. Sequence numbers are assigned here, from one counter per
/// store, so several service instances appending to the same store still
/// get a single total order with no gaps.
#[async_trait]
pub trait StorageBackend: Send + Sync {
    async fn append(
        &self,
        msg: LogMessage,
        received_at: Timestamp,
        instance_id: &str,
    ) -> Result<StoredMessage, BackendError>;

    /// Matches ordered by seq, honouring `after_seq`, `until_seq` and `limit`.
    async fn query(&self, q: &MessageQuery) -> Result<Vec<StoredMessage>, BackendError>;

    async fn count(&self) -> Result<u64, BackendError>;

    async fn last_seq(&self) -> Result<u64, BackendError>;
}

pub(crate) fn select<'a, I>(iter: I, q: &MessageQuery, c: &CompiledCriteria) -> Vec<StoredMessage>
where
    I: Iterator<Item = &'a StoredMessage>,
{
    let limit = q.limit.unwrap_or(usize::MAX);
    iter.filter(|m| q.in_range(m.seq) && c.matches(&m.msg))
        .take(limit)
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Memory,
    File,
    Db,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "memory" => Ok(BackendKind::Memory),
            "file" => Ok(BackendKind::File),
            "db" => Ok(BackendKind::Db),
            other => Err(format!("unknown backend {other:?} (memory|file|db)")),
        }
    }
}

/// The store shared by a cluster of service instances.
///
/// Memory and file stores are one object shared by reference. The database
/// store is shared by location: every instance opens its own connection,
/// and each connection pays `link_latency` per statement.
#[derive(Clone)]
pub enum SharedStore {
    Memory(Arc<MemoryBackend>),
    File(Arc<FileBackend>),
    Db { path: PathBuf, link_latency: Duration },
}

impl SharedStore {
    pub fn memory() -> Self {
        SharedStore::Memory(Arc::new(MemoryBackend::new()))
    }

    pub fn file(path: impl Into<PathBuf>) -> Result<Self, BackendError> {
        Ok(SharedStore::File(Arc::new(FileBackend::open(path.into())?)))
    }

    pub fn db(path: impl Into<PathBuf>, link_latency: Duration) -> Result<Self, BackendError> {
        let path = path.into();
        SqlBackend::open(&path, Duration::ZERO)?;
        Ok(SharedStore::Db { path, link_latency })
    }

    pub fn kind(&self) -> BackendKind {
        match self {
            SharedStore::Memory(_) => BackendKind::Memory,
            SharedStore::File(_) => BackendKind::File,
            SharedStore::Db { .. } => BackendKind::Db,
        }
    }

    /// A handle for one service instance.
    pub fn connect(&self) -> Result<Arc<dyn StorageBackend>, BackendError> {
        Ok(match self {
            SharedStore::Memory(m) => m.clone(),
            SharedStore::File(f) => f.clone(),
            SharedStore::Db { path, link_latency } => Arc::new(SqlBackend::open(path, *link_latency)?),
        })
    }
}
