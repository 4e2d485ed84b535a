//! Service registry state: who provides which named service, and where.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::time::Timestamp;

pub const DEFAULT_TTL: Duration = Duration::from_secs(10);
pub const DEFAULT_HEARTBEAT: Duration = Duration::from_secs(3);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceRecord {
    pub name: String,
    pub instance_id: String,
    pub url: String,
    pub registered_at: Timestamp,
    pub last_heartbeat: Timestamp,
}

impl ServiceRecord {
    pub fn new(name: impl Into<String>, instance_id: impl Into<String>, url: impl Into<String>) -> Self {
        let now = Timestamp::now();
        Self {
            name: name.into(),
            instance_id: instance_id.into(),
            url: url.into(),
            registered_at: now,
            last_heartbeat: now,
        }
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp::now()
    }
}

/// Clock moved by hand, for TTL tests.
#[derive(Debug)]
pub struct ManualClock(Mutex<Timestamp>);

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        Self(Mutex::new(start))
    }

    pub fn advance(&self, d: Duration) {
        let mut t = self.0.lock();
        *t = t.checked_add(d).expect("clock overflow");
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        *self.0.lock()
    }
}

struct Entry {
    record: ServiceRecord,
    // Breaks registered_at ties so lookup order is stable.
    order: u64,
}

/// Register/lookup table. Writes are serialized; lookups run concurrently.
pub struct ServiceRegistry {
    ttl: Duration,
    clock: Arc<dyn Clock>,
    entries: RwLock<HashMap<(String, String), Entry>>,
    counter: Mutex<u64>,
}

impl ServiceRegistry {
    pub fn new(ttl: Duration) -> Self {
        Self::with_clock(ttl, Arc::new(SystemClock))
    }

    pub fn with_clock(ttl: Duration, clock: Arc<dyn Clock>) -> Self {
        Self {
            ttl,
            clock,
            entries: RwLock::new(HashMap::new()),
            counter: Mutex::new(0),
        }
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    fn is_stale(&self, rec: &ServiceRecord, now: Timestamp) -> bool {
        now.since(rec.last_heartbeat) > self.ttl
    }

    /// Upsert by (name, instance_id). A live record keeps its original
    /// registration time; a stale one is treated as a fresh registration.
    pub fn register(&self, mut rec: ServiceRecord) -> ServiceRecord {
        let now = self.clock.now();
        rec.last_heartbeat = now;
        let key = (rec.name.clone(), rec.instance_id.clone());
        let mut entries = self.entries.write();
        match entries.get_mut(&key) {
            Some(existing) if !self.is_stale(&existing.record, now) => {
                rec.registered_at = existing.record.registered_at;
                existing.record = rec.clone();
            }
            _ => {
                rec.registered_at = now;
                let order = {
                    let mut c = self.counter.lock();
                    *c += 1;
                    *c
                };
                entries.insert(
                    key,
                    Entry {
                        record: rec.clone(),
                        order,
                    },
                );
            }
        }
        rec
    }

    pub fn deregister(&self, name: &str, instance_id: &str) -> bool {
        self.entries
            .write()
            .remove(&(name.to_string(), instance_id.to_string()))
            .is_some()
    }

    /// Live instances of `name`, ordered by registration.
    pub fn lookup(&self, name: &str) -> Vec<ServiceRecord> {
        let now = self.clock.now();
        let entries = self.entries.read();
        let mut live: Vec<_> = entries
            .values()
            .filter(|e| e.record.name == name && !self.is_stale(&e.record, now))
            .collect();
        live.sort_by_key(|e| (e.record.registered_at, e.order));
        live.into_iter().map(|e| e.record.clone()).collect()
    }

    /// Drops stale records; returns how many were removed.
    pub fn sweep(&self) -> usize {
        let now = self.clock.now();
        let mut entries = self.entries.write();
        let before = entries.len();
        entries.retain(|_, e| !self.is_stale(&e.record, now));
        before - entries.len()
    }
}
