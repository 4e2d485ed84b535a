//! Monitor throughput against instance count, publisher count and
//! subscriber count.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use rcms_client::{Caller, HttpTransport, ImsClient};
use rcms_core::ims::{BackendKind, Criteria, MessageQuery, SharedStore};
use rcms_core::model::{LogMessage, Severity, Subscription};
use rcms_core::wire::{Body, Envelope, Kind};
use rcms_service::ims::{ImsCluster, ImsConfig};
use rcms_service::server::{serve_handler, EnvelopeHandler, Reply, ServerHandle, StatusCode};

use crate::report::{BenchError, BenchResult, Params};
use crate::MIN_REPS;

pub const SCALING: &str = "ims_scaling";
pub const PUBLISHERS: &str = "ims_publishers";
pub const SUBSCRIBERS: &str = "ims_subscribers";

pub const MESSAGE_BYTES: usize = 400;
/// Per-statement cost of the database link.
pub const DEFAULT_LINK_LATENCY: Duration = Duration::from_millis(4);

const PUBLISHER_SOURCE: &str = "bench/pub-";

#[derive(Debug, Clone, Copy)]
pub struct Point {
    pub k: usize,
    pub p: usize,
    pub s: usize,
}

#[derive(Debug, Clone)]
pub struct ImsBench {
    pub experiment: String,
    pub points: Vec<Point>,
    pub duration: Duration,
    pub reps: usize,
    pub backend: BackendKind,
    pub link_latency: Duration,
}

impl ImsBench {
    /// k = 1..4 with 16 publishers over the database store.
    pub fn scaling() -> Self {
        Self {
            experiment: SCALING.into(),
            points: (1..=4).map(|k| Point { k, p: 16, s: 0 }).collect(),
            duration: Duration::from_secs(1),
            reps: MIN_REPS,
            backend: BackendKind::Db,
            link_latency: DEFAULT_LINK_LATENCY,
        }
    }

    /// One instance, publishers swept up to 64.
    pub fn publishers() -> Self {
        Self {
            experiment: PUBLISHERS.into(),
            points: [1, 2, 4, 8, 16, 32, 64].into_iter().map(|p| Point { k: 1, p, s: 0 }).collect(),
            ..Self::scaling()
        }
    }

    /// One instance in memory, 0 against 8 subscribers.
    pub fn subscribers() -> Self {
        Self {
            experiment: SUBSCRIBERS.into(),
            points: [0, 8].into_iter().map(|s| Point { k: 1, p: 16, s }).collect(),
            backend: BackendKind::Memory,
            ..Self::scaling()
        }
    }
}

/// Counts pushes and nothing else.
#[derive(Default)]
struct CountingSubscriber {
    received: AtomicU64,
}

#[async_trait]
impl EnvelopeHandler for CountingSubscriber {
    fn name(&self) -> String {
        "bench-subscriber".into()
    }

    async fn handle(&self, env: Envelope) -> Reply {
        match (&env.kind, &env.body) {
            (Kind::Event, Body::StoredMessage(_)) => {
                self.received.fetch_add(1, Ordering::Relaxed);
                Reply::status(StatusCode::NO_CONTENT)
            }
            (Kind::Event, _) => Reply::status(StatusCode::NO_CONTENT),
            _ => Reply::status(StatusCode::BAD_REQUEST),
        }
    }
}

pub fn check_conservation(stored: u64, acked: u64) -> Result<(), BenchError> {
    if stored == acked {
        Ok(())
    } else {
        Err(BenchError::ConservationViolation { stored, acked })
    }
}

/// What one timed run observed.
#[derive(Debug, Clone, Copy)]
pub struct Run {
    pub acked: u64,
    pub stored: u64,
    /// Until the last publisher stopped.
    pub published: Duration,
    /// Until every subscription had delivered or dropped everything.
    pub drained: Duration,
}

impl Run {
    /// Messages per second through the service, a message counting once
    /// it has been stored and forwarded to every subscriber.
    pub fn rate(&self) -> f64 {
        self.acked as f64 / self.drained.as_secs_f64()
    }
}

fn payload(publisher: usize, i: u64) -> String {
    let head = format!("p{publisher} m{i} ");
    let fill = MESSAGE_BYTES.saturating_sub(head.len());
    head + &"x".repeat(fill)
}

fn open_store(b: &ImsBench, dir: &std::path::Path) -> Result<SharedStore, BenchError> {
    let setup = |e: rcms_core::ims::BackendError| BenchError::Setup(e.to_string());
    match b.backend {
        BackendKind::Memory => Ok(SharedStore::memory()),
        BackendKind::File => SharedStore::file(dir.join("ims.log")).map_err(setup),
        BackendKind::Db => SharedStore::db(dir.join("ims.db"), b.link_latency).map_err(setup),
    }
}

/// One run on a fresh store: `p` publishers send flat-out for `duration`,
/// each round-robin over all `k` instances starting at its own offset.
pub async fn run_once(b: &ImsBench, pt: Point) -> Result<Run, BenchError> {
    let dir = tempfile::tempdir().map_err(|e| BenchError::Setup(e.to_string()))?;
    let store = open_store(b, dir.path())?;
    let caller = Caller::new(HttpTransport::shared(), "bench");
    let cluster = ImsCluster::spawn(pt.k, &store, caller.clone(), ImsConfig::default(), None)
        .await
        .map_err(|e| BenchError::PortExhaustion(e.message))?;
    let urls = cluster.urls();

    let mut subscribers: Vec<(Arc<CountingSubscriber>, ServerHandle, usize, String)> = Vec::new();
    for i in 0..pt.s {
        let rx = Arc::new(CountingSubscriber::default());
        let server = serve_handler(rx.clone(), "127.0.0.1:0")
            .await
            .map_err(|e| BenchError::PortExhaustion(e.to_string()))?;
        let mut sub = Subscription::new(server.url());
        sub.source_pattern = format!("{PUBLISHER_SOURCE}*");
        let at = i % urls.len();
        let id = ImsClient::new(caller.clone(), urls.clone())
            .subscribe(&urls[at], sub)
            .await
            .map_err(|e| BenchError::Setup(e.to_string()))?
            .subscription_id;
        subscribers.push((rx, server, at, id));
    }

    let start = Instant::now();
    let deadline = start + b.duration;
    let mut tasks = Vec::new();
    for p in 0..pt.p {
        let mut mine = urls.clone();
        mine.rotate_left(p % urls.len());
        let client = ImsClient::new(caller.clone(), mine);
        tasks.push(tokio::spawn(async move {
            let source = format!("{PUBLISHER_SOURCE}{p:02}");
            let mut acked = 0u64;
            let mut i = 0u64;
            while Instant::now() < deadline {
                let m = LogMessage::new(source.as_str(), "bench", Severity::Info, payload(p, i));
                if client.publish(m).await.is_ok() {
                    acked += 1;
                }
                i += 1;
            }
            acked
        }));
    }
    let mut acked = 0;
    for t in tasks {
        acked += t.await.map_err(|e| BenchError::Setup(e.to_string()))?;
    }
    let published = start.elapsed();

    // Only publisher traffic counts: instances may log warnings of their own.
    let backend = store.connect().map_err(|e| BenchError::Setup(e.to_string()))?;
    let q = MessageQuery::new(Criteria::all().source(format!("{PUBLISHER_SOURCE}*")));
    let ingested_by = stored_by(&*backend, &q).await?;
    let stored = ingested_by.len() as u64;
    let delivery = drain(&cluster, &subscribers, &backend_counts(&cluster, &ingested_by)).await;
    let drained = if subscribers.is_empty() { published } else { start.elapsed() };
    cluster.shutdown().await;
    for (_, s, _, _) in subscribers {
        s.shutdown().await;
    }
    check_conservation(stored, acked)?;
    delivery?;
    Ok(Run {
        acked,
        stored,
        published,
        drained,
    })
}

async fn stored_by(backend: &dyn rcms_core::ims::StorageBackend, q: &MessageQuery) -> Result<Vec<String>, BenchError> {
    Ok(backend
        .query(q)
        .await
        .map_err(|e| BenchError::Setup(e.to_string()))?
        .into_iter()
        .map(|m| m.instance_id)
        .collect())
}

/// Messages each instance ingested, by instance index.
fn backend_counts(cluster: &ImsCluster, ingested_by: &[String]) -> Vec<u64> {
    cluster
        .instances
        .iter()
        .map(|ims| ingested_by.iter().filter(|id| *id == ims.id()).count() as u64)
        .collect()
}

/// Waits until every subscription has delivered or dropped everything its
/// instance ingested, and checks the subscribers saw what was delivered.
async fn drain(
    cluster: &ImsCluster,
    subscribers: &[(Arc<CountingSubscriber>, ServerHandle, usize, String)],
    ingested: &[u64],
) -> Result<(), BenchError> {
    let limit = Instant::now() + Duration::from_secs(60);
    for (rx, _, at, id) in subscribers {
        loop {
            let st = cluster.instances[*at]
                .stats(id)
                .ok_or_else(|| BenchError::Setup(format!("subscription {id} vanished")))?;
            if st.delivered + st.dropped == ingested[*at] {
                let got = rx.received.load(Ordering::Relaxed);
                if got != st.delivered {
                    return Err(BenchError::Setup(format!(
                        "subscriber {id} received {got}, monitor delivered {}",
                        st.delivered
                    )));
                }
                break;
            }
            if Instant::now() > limit {
                return Err(BenchError::Setup(format!("subscription {id} never drained: {st:?}")));
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
    }
    Ok(())
}

/// Runs `reps` samples per point; the first, untimed run warms up.
pub async fn bench_ims(b: &ImsBench) -> Result<Vec<BenchResult>, BenchError> {
    if b.reps < MIN_REPS {
        return Err(BenchError::TooFewReps(b.reps));
    }
    let mut out = Vec::new();
    for &pt in &b.points {
        let params = Params {
            k: Some(pt.k),
            p: Some(pt.p),
            s: Some(pt.s),
            ..Params::default()
        };
        let mut result = BenchResult::new(&b.experiment, params, "msgs/s");
        run_once(&ImsBench { duration: b.duration / 4, ..b.clone() }, pt).await?;
        for _ in 0..b.reps {
            result.samples.push(run_once(b, pt).await?.rate());
        }
        out.push(result);
    }
    Ok(out)
}
