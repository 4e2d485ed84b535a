//! Resource service: registry, allocation and the periodic availability scan.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use parking_lot::{Mutex, RwLock};
use rcms_client::Caller;
use rcms_core::journal::{Journal, JournalError};
use rcms_core::resource::{ResourceError, ResourceRegistry, ScanReport};
use rcms_core::time::Timestamp;
use rcms_core::wire::*;

use crate::server::{serve_handler, EnvelopeHandler, Reply, ServerHandle};

pub const DEFAULT_SCAN_PERIOD: Duration = Duration::from_secs(30);
pub const DEFAULT_PROBE_TIMEOUT: Duration = Duration::from_secs(1);
const PROBE_CONCURRENCY: usize = 64;
const NAME: &str = "resource-service";

pub struct ResourceService {
    registry: RwLock<ResourceRegistry>,
    journal: Mutex<Option<Journal>>,
    caller: Caller,
    probe_timeout: Duration,
    scan_lock: tokio::sync::Mutex<()>,
}

pub fn error_body(e: &ResourceError) -> ErrorBody {
    ErrorBody {
        code: e.code().into(),
        message: e.to_string(),
        ids: e.ids(),
        holder: e.holder().map(String::from),
    }
}

impl ResourceService {
    pub fn new(caller: Caller) -> Arc<Self> {
        Arc::new(Self {
            registry: RwLock::new(ResourceRegistry::new()),
            journal: Mutex::new(None),
            caller,
            probe_timeout: DEFAULT_PROBE_TIMEOUT,
            scan_lock: tokio::sync::Mutex::new(()),
        })
    }

    /// Opens the journal at `path`, replaying what it already holds.
    pub fn with_journal(caller: Caller, path: &Path) -> Result<Arc<Self>, JournalError> {
        let (journal, entries) = Journal::open(path)?;
        let mut reg = ResourceRegistry::new();
        for env in entries {
            if let Err(e) = apply(&mut reg, &env) {
                tracing::warn!(id = %env.id, "journal entry not reapplied: {e}");
            }
        }
        Ok(Arc::new(Self {
            registry: RwLock::new(reg),
            journal: Mutex::new(Some(journal)),
            caller,
            probe_timeout: DEFAULT_PROBE_TIMEOUT,
            scan_lock: tokio::sync::Mutex::new(()),
        }))
    }

    pub fn with_probe_timeout(self: Arc<Self>, timeout: Duration) -> Arc<Self> {
        let mut this = Arc::try_unwrap(self).unwrap_or_else(|_| panic!("service already shared"));
        this.probe_timeout = timeout;
        Arc::new(this)
    }

    pub fn read<T>(&self, f: impl FnOnce(&ResourceRegistry) -> T) -> T {
        f(&self.registry.read())
    }

    /// Applies a state-changing envelope under the single writer lock and
    /// journals it if it succeeded.
    fn write(&self, env: &Envelope) -> Result<Body, ResourceError> {
        let mut reg = self.registry.write();
        let body = apply(&mut reg, env)?;
        if let Some(j) = self.journal.lock().as_mut() {
            if let Err(e) = j.append(env) {
                tracing::error!("journal append failed: {e}");
            }
        }
        Ok(body)
    }

    /// Probes every resource once and records availability.
    pub async fn scan_once(&self) -> ScanReport {
        let _one_at_a_time = self.scan_lock.lock().await;
        let targets = self.registry.read().scan_targets();
        let probes: Vec<(String, bool)> = stream::iter(targets)
            .map(|(id, uri)| async move {
                let env = self.caller.envelope(Kind::Query, &id, Body::Probe(Empty {}));
                let up = match self.caller.transport().request(&uri, &env, self.probe_timeout).await {
                    Ok(_) => true,
                    Err(WireError::Remote(_)) => true,
                    Err(_) => false,
                };
                (id, up)
            })
            .buffer_unordered(PROBE_CONCURRENCY)
            .collect()
            .await;
        self.registry.write().apply_scan(&probes, Timestamp::now())
    }

    /// Runs [`scan_once`](Self::scan_once) every `period` until the handle is dropped.
    pub fn spawn_scanner(self: &Arc<Self>, period: Duration) -> ScannerHandle {
        let this = self.clone();
        ScannerHandle(tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            tick.tick().await;
            loop {
                tick.tick().await;
                let report = this.scan_once().await;
                tracing::debug!(unreachable = report.unreachable().len(), "scan complete");
            }
        }))
    }

    pub async fn spawn(self: &Arc<Self>, addr: &str) -> std::io::Result<ServerHandle> {
        serve_handler(self.clone(), addr).await
    }
}

pub struct ScannerHandle(tokio::task::JoinHandle<()>);

impl Drop for ScannerHandle {
    fn drop(&mut self) {
        self.0.abort();
    }
}

fn apply(reg: &mut ResourceRegistry, env: &Envelope) -> Result<Body, ResourceError> {
    let ts = env.issued_at;
    match &env.body {
        Body::Resource(r) => {
            let id = reg.register_resource(r.clone())?;
            Ok(Registered { id, version: reg.version() }.into())
        }
        Body::Partition(p) => {
            let id = reg.define_partition(p.clone())?;
            Ok(Registered { id, version: reg.version() }.into())
        }
        Body::Allocate(a) => Ok(reg.allocate(&a.partition_id, &a.session_id, ts)?.into()),
        Body::Release(s) => {
            reg.release(&s.session_id)?;
            Ok(Ack::default().into())
        }
        other => unreachable!("not a registry write: {}", other.tag()),
    }
}

#[async_trait]
impl EnvelopeHandler for ResourceService {
    fn name(&self) -> String {
        NAME.into()
    }

    async fn handle(&self, env: Envelope) -> Reply {
        let write_kind = match (&env.kind, &env.body) {
            (Kind::Register, Body::Resource(_) | Body::Partition(_)) => Some(Kind::Ack),
            (Kind::Command, Body::Allocate(_)) => Some(Kind::Result),
            (Kind::Command, Body::Release(_)) => Some(Kind::Ack),
            _ => None,
        };
        if let Some(kind) = write_kind {
            return match self.write(&env) {
                Ok(body) => Reply::to(&env, NAME, kind, body),
                Err(e) => Reply::error(&env, NAME, error_body(&e)),
            };
        }
        match (&env.kind, &env.body) {
            (Kind::Command, Body::Scan(_)) => {
                let report = self.scan_once().await;
                Reply::to(&env, NAME, Kind::Result, report)
            }
            (Kind::Query, Body::ResourceQuery(q)) => {
                let reg = self.registry.read();
                match reg.query(&q.filter) {
                    Ok(resources) => {
                        let version = reg.version();
                        drop(reg);
                        Reply::to(&env, NAME, Kind::Result, Resources { resources, version })
                    }
                    Err(e) => {
                        drop(reg);
                        Reply::error(&env, NAME, error_body(&e))
                    }
                }
            }
            (Kind::Query, Body::DescribePartition(p)) => {
                let result = {
                    let reg = self.registry.read();
                    reg.describe(&p.partition_id).map(|(partitions, resources)| PartitionTree {
                        partitions,
                        resources,
                        version: reg.version(),
                    })
                };
                match result {
                    Ok(tree) => Reply::to(&env, NAME, Kind::Result, tree),
                    Err(e) => Reply::error(&env, NAME, error_body(&e)),
                }
            }
            (Kind::Query, Body::VersionQuery(_)) => {
                let version = self.registry.read().version();
                Reply::to(&env, NAME, Kind::Result, Version { version })
            }
            (Kind::Query, Body::Probe(_)) => Reply::to(&env, NAME, Kind::Result, ProbeOk { service: NAME.into() }),
            _ => Reply::unsupported(&env, NAME),
        }
    }
}
