use std::path::Path;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use rusqlite::{params, Connection};

use super::{BackendError, MessageQuery, StorageBackend, StoredMessage};
use crate::model::{LogMessage, Severity};
use crate::time::Timestamp;

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS messages (
    seq         INTEGER PRIMARY KEY,
    source      TEXT    NOT NULL,
    msg_type    TEXT    NOT NULL,
    severity    INTEGER NOT NULL,
    ts          TEXT    NOT NULL,
    payload     TEXT    NOT NULL,
    received_at TEXT    NOT NULL,
    instance_id TEXT    NOT NULL
);
CREATE INDEX IF NOT EXISTS messages_severity ON messages (severity);
";

/// Relational store on SQLite. One value is one connection; instances that
/// share a database each open their own.
///
/// Statements on a connection are serialized. `link_latency` is paid once
/// per statement while the connection is held, standing in for the round
/// trip to a database on another host.
pub struct SqlBackend {
    conn: Mutex<Connection>,
    busy: tokio::sync::Mutex<()>,
    link_latency: Duration,
}

impl SqlBackend {
    pub fn open(path: &Path, link_latency: Duration) -> Result<Self, BackendError> {
        let conn = Connection::open(path)?;
        conn.busy_timeout(Duration::from_secs(10))?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "NORMAL")?;
        conn.execute_batch(SCHEMA)?;
        Ok(Self {
            conn: Mutex::new(conn),
            busy: tokio::sync::Mutex::new(()),
            link_latency,
        })
    }

    async fn round_trip(&self) {
        if !self.link_latency.is_zero() {
            tokio::time::sleep(self.link_latency).await;
        }
    }
}

fn row_to_message(row: &rusqlite::Row<'_>) -> rusqlite::Result<StoredMessage> {
    let parse_ts = |idx: usize| -> rusqlite::Result<Timestamp> {
        let s: String = row.get(idx)?;
        s.parse().map_err(|e| {
            rusqlite::Error::FromSqlConversionFailure(idx, rusqlite::types::Type::Text, Box::new(e))
        })
    };
    let rank: u8 = row.get(3)?;
    let severity = Severity::from_rank(rank).ok_or_else(|| {
        rusqlite::Error::IntegralValueOutOfRange(3, rank as i64)
    })?;
    Ok(StoredMessage {
        seq: row.get::<_, i64>(0)? as u64,
        msg: LogMessage {
            source: row.get(1)?,
            msg_type: row.get(2)?,
            severity,
            timestamp: parse_ts(4)?,
            payload: row.get(5)?,
        },
        received_at: parse_ts(6)?,
        instance_id: row.get(7)?,
    })
}

#[async_trait]
impl StorageBackend for SqlBackend {
    async fn append(
        &self,
        msg: LogMessage,
        received_at: Timestamp,
        instance_id: &str,
    ) -> Result<StoredMessage, BackendError> {
        let _busy = self.busy.lock().await;
        self.round_trip().await;
        let seq = {
            let conn = self.conn.lock();
            conn.execute(
                "INSERT INTO messages (source, msg_type, severity, ts, payload, received_at, instance_id)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
                params![
                    msg.source,
                    msg.msg_type,
                    msg.severity.rank(),
                    msg.timestamp.to_string(),
                    msg.payload,
                    received_at.to_string(),
                    instance_id
                ],
            )?;
            conn.last_insert_rowid() as u64
        };
        Ok(StoredMessage {
            seq,
            msg,
            received_at,
            instance_id: instance_id.to_string(),
        })
    }

    async fn query(&self, q: &MessageQuery) -> Result<Vec<StoredMessage>, BackendError> {
        let compiled = q.validate()?;
        let _busy = self.busy.lock().await;
        self.round_trip().await;
        let conn = self.conn.lock();
        let mut stmt = conn.prepare_cached(
            "SELECT seq, source, msg_type, severity, ts, payload, received_at, instance_id
             FROM messages WHERE seq > ?1 AND seq <= ?2 AND severity >= ?3 ORDER BY seq",
        )?;
        let until = q.until_seq.map_or(i64::MAX, |u| u.min(i64::MAX as u64) as i64);
        let min_rank = q.criteria.min_severity.map_or(0, |s| s.rank());
        let limit = q.limit.unwrap_or(usize::MAX);
        let mut out = Vec::new();
        let rows = stmt.query_map(params![q.after_seq as i64, until, min_rank], row_to_message)?;
        for row in rows {
            let m = row?;
            if compiled.matches(&m.msg) {
                out.push(m);
                if out.len() >= limit {
                    break;
                }
            }
        }
        Ok(out)
    }

    async fn count(&self) -> Result<u64, BackendError> {
        let _busy = self.busy.lock().await;
        self.round_trip().await;
        let conn = self.conn.lock();
        let n: i64 = conn.query_row("SELECT count(*) FROM messages", [], |r| r.get(0))?;
        Ok(n as u64)
    }

    async fn last_seq(&self) -> Result<u64, BackendError> {
        let _busy = self.busy.lock().await;
        self.round_trip().await;
        let conn = self.conn.lock();
        let n: i64 = conn.query_row("SELECT coalesce(max(seq), 0) FROM messages", [], |r| r.get(0))?;
        Ok(n as u64)
    }
}
