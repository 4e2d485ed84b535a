use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use rcms_core::control::SessionReport;
use rcms_core::ims::{MessageQuery, StoredMessage};
use rcms_core::job::{JobSpec, JobStatus};
use rcms_core::model::{LogMessage, Partition, Resource, Session, Subscription};
use rcms_core::registry::ServiceRecord;
use rcms_core::resource::{Allocation, ResourceFilter, ScanReport};
use rcms_core::wire::*;
use tokio::task::JoinHandle;

use crate::transport::Transport;

macro_rules! expect_body {
    ($e:expr, $variant:ident) => {
        match $e {
            Body::$variant(v) => Ok(v),
            other => Err(unexpected(stringify!($variant), &other)),
        }
    };
}

/// A transport plus the identity and timeout used for every request.
#[derive(Clone)]
pub struct Caller {
    transport: Arc<dyn Transport>,
    source: String,
    timeout: Duration,
}

impl Caller {
    pub fn new(transport: Arc<dyn Transport>, source: impl Into<String>) -> Self {
        Self {
            transport,
            source: source.into(),
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn transport(&self) -> &Arc<dyn Transport> {
        &self.transport
    }

    pub fn envelope(&self, kind: Kind, target: &str, body: impl Into<Body>) -> Envelope {
        Envelope::new(kind, self.source.clone(), target, body)
    }

    /// Sends a request and returns the reply body; error replies become
    /// [`WireError::Remote`].
    pub async fn call(&self, url: &str, kind: Kind, body: impl Into<Body>) -> Result<Body, WireError> {
        let env = self.envelope(kind, url, body);
        self.transport.request(url, &env, self.timeout).await?.into_body()
    }

    pub async fn send(&self, url: &str, env: &Envelope) -> Result<Body, WireError> {
        self.transport.request(url, env, self.timeout).await?.into_body()
    }

    pub async fn push(&self, url: &str, kind: Kind, body: impl Into<Body>) -> Result<(), WireError> {
        let env = self.envelope(kind, url, body);
        self.transport.push(url, &env).await
    }

    pub async fn probe(&self, url: &str) -> Result<ProbeOk, WireError> {
        expect_body!(self.call(url, Kind::Query, Body::Probe(Empty {})).await?, ProbeOk)
    }

    pub async fn fsm_table(&self, url: &str) -> Result<FsmTable, WireError> {
        expect_body!(self.call(url, Kind::Query, Body::FsmTableQuery(Empty {})).await?, FsmTable)
    }
}

#[derive(Clone)]
pub struct RegistryClient {
    caller: Caller,
    url: String,
}

impl RegistryClient {
    pub fn new(caller: Caller, url: impl Into<String>) -> Self {
        Self { caller, url: url.into() }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub async fn register(&self, rec: &ServiceRecord) -> Result<(), WireError> {
        expect_body!(self.caller.call(&self.url, Kind::Register, rec.clone()).await?, Ack).map(drop)
    }

    pub async fn deregister(&self, name: &str, instance_id: &str) -> Result<(), WireError> {
        let body = Deregister {
            name: name.into(),
            instance_id: instance_id.into(),
        };
        expect_body!(self.caller.call(&self.url, Kind::Command, body).await?, Ack).map(drop)
    }

    pub async fn lookup(&self, name: &str) -> Result<Vec<ServiceRecord>, WireError> {
        let body = Lookup { name: name.into() };
        expect_body!(self.caller.call(&self.url, Kind::Lookup, body).await?, Services).map(|s| s.records)
    }

    pub async fn lookup_urls(&self, name: &str) -> Result<Vec<String>, WireError> {
        Ok(self.lookup(name).await?.into_iter().map(|r| r.url).collect())
    }

    /// Registers now, then keeps re-registering every `interval` until the
    /// returned guard is dropped.
    pub async fn heartbeat(&self, rec: ServiceRecord, interval: Duration) -> Result<Heartbeat, WireError> {
        self.register(&rec).await?;
        let this = self.clone();
        let task = tokio::spawn(async move {
            loop {
                tokio::time::sleep(interval).await;
                if let Err(e) = this.register(&rec).await {
                    tracing::warn!(name = %rec.name, instance = %rec.instance_id, "heartbeat failed: {e}");
                }
            }
        });
        Ok(Heartbeat(task))
    }
}

pub struct Heartbeat(JoinHandle<()>);

impl Drop for Heartbeat {
    fn drop(&mut self) {
        self.0.abort();
    }
}

/// Client for the resource service, with a read-through query cache that
/// is revalidated against the registry's version counter.
pub struct ResourceClient {
    caller: Caller,
    url: String,
    cache: Mutex<HashMap<ResourceFilterKey, (u64, Vec<Resource>)>>,
    hits: AtomicU64,
}

type ResourceFilterKey = String;

impl ResourceClient {
    pub fn new(caller: Caller, url: impl Into<String>) -> Self {
        Self {
            caller,
            url: url.into(),
            cache: Mutex::new(HashMap::new()),
            hits: AtomicU64::new(0),
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub async fn register_resource(&self, r: Resource) -> Result<Registered, WireError> {
        expect_body!(self.caller.call(&self.url, Kind::Register, r).await?, Registered)
    }

    pub async fn define_partition(&self, p: Partition) -> Result<Registered, WireError> {
        expect_body!(self.caller.call(&self.url, Kind::Register, p).await?, Registered)
    }

    pub async fn allocate(&self, partition_id: &str, session_id: &str) -> Result<Allocation, WireError> {
        let body = AllocateRequest {
            partition_id: partition_id.into(),
            session_id: session_id.into(),
        };
        expect_body!(self.caller.call(&self.url, Kind::Command, body).await?, Allocation)
    }

    pub async fn release(&self, session_id: &str) -> Result<(), WireError> {
        let body = Body::Release(SessionRef {
            session_id: session_id.into(),
        });
        expect_body!(self.caller.call(&self.url, Kind::Command, body).await?, Ack).map(drop)
    }

    pub async fn scan(&self) -> Result<ScanReport, WireError> {
        expect_body!(self.caller.call(&self.url, Kind::Command, Body::Scan(Empty {})).await?, ScanReport)
    }

    pub async fn query(&self, filter: &ResourceFilter) -> Result<Resources, WireError> {
        let body = ResourceQuery { filter: filter.clone() };
        expect_body!(self.caller.call(&self.url, Kind::Query, body).await?, Resources)
    }

    pub async fn describe(&self, partition_id: &str) -> Result<PartitionTree, WireError> {
        let body = PartitionRef {
            partition_id: partition_id.into(),
        };
        expect_body!(self.caller.call(&self.url, Kind::Query, body).await?, PartitionTree)
    }

    pub async fn version(&self) -> Result<u64, WireError> {
        expect_body!(self.caller.call(&self.url, Kind::Query, Body::VersionQuery(Empty {})).await?, Version)
            .map(|v| v.version)
    }

    pub async fn query_cached(&self, filter: &ResourceFilter) -> Result<Vec<Resource>, WireError> {
        let key = format!("{filter:?}");
        let version = self.version().await?;
        if let Some((v, rs)) = self.cache.lock().get(&key) {
            if *v == version {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(rs.clone());
            }
        }
        let fresh = self.query(filter).await?;
        self.cache
            .lock()
            .insert(key, (fresh.version, fresh.resources.clone()));
        Ok(fresh.resources)
    }

    pub fn cache_hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }
}

/// Monitor-service client. Publishes rotate over the known instances.
pub struct ImsClient {
    caller: Caller,
    urls: Mutex<Vec<String>>,
    next: AtomicUsize,
}

impl ImsClient {
    pub fn new(caller: Caller, urls: Vec<String>) -> Self {
        Self {
            caller,
            urls: Mutex::new(urls),
            next: AtomicUsize::new(0),
        }
    }

    pub async fn discover(caller: Caller, registry: &RegistryClient) -> Result<Self, WireError> {
        let urls = registry.lookup_urls("ims").await?;
        if urls.is_empty() {
            return Err(WireError::Remote(ErrorBody::new(
                "RegistryUnavailable",
                "no ims instance registered",
            )));
        }
        Ok(Self::new(caller, urls))
    }

    pub fn urls(&self) -> Vec<String> {
        self.urls.lock().clone()
    }

    fn pick(&self) -> Result<String, WireError> {
        let urls = self.urls.lock();
        if urls.is_empty() {
            return Err(WireError::Transport("no ims instance known".into()));
        }
        let i = self.next.fetch_add(1, Ordering::Relaxed) % urls.len();
        Ok(urls[i].clone())
    }

    pub fn first(&self) -> Result<String, WireError> {
        self.urls
            .lock()
            .first()
            .cloned()
            .ok_or_else(|| WireError::Transport("no ims instance known".into()))
    }

    pub async fn publish(&self, msg: LogMessage) -> Result<(), WireError> {
        let url = self.pick()?;
        self.caller.push(&url, Kind::Publish, msg).await
    }

    pub async fn subscribe(&self, url: &str, sub: Subscription) -> Result<Subscribed, WireError> {
        expect_body!(self.caller.call(url, Kind::Subscribe, sub).await?, Subscribed)
    }

    pub async fn unsubscribe(&self, url: &str, subscription_id: &str) -> Result<(), WireError> {
        let body = Body::Unsubscribe(SubscriptionRef {
            subscription_id: subscription_id.into(),
        });
        expect_body!(self.caller.call(url, Kind::Unsubscribe, body).await?, Ack).map(drop)
    }

    pub async fn query(&self, url: &str, q: &MessageQuery) -> Result<Vec<StoredMessage>, WireError> {
        expect_body!(self.caller.call(url, Kind::Query, q.clone()).await?, Messages).map(|m| m.messages)
    }

    /// Walks the whole result in pages of `page` messages.
    pub async fn query_all(&self, url: &str, q: &MessageQuery, page: usize) -> Result<Vec<StoredMessage>, WireError> {
        let mut out = Vec::new();
        let mut q = q.clone().limit(page);
        loop {
            let batch = self.query(url, &q).await?;
            let Some(last) = batch.last() else { break };
            q.after_seq = last.seq;
            let done = batch.len() < page;
            out.extend(batch);
            if done {
                break;
            }
        }
        Ok(out)
    }

    pub async fn stats(&self, url: &str, subscription_id: &str) -> Result<DeliveryStats, WireError> {
        let body = Body::StatsQuery(SubscriptionRef {
            subscription_id: subscription_id.into(),
        });
        expect_body!(self.caller.call(url, Kind::Query, body).await?, DeliveryStats)
    }
}

#[derive(Clone)]
pub struct SessionClient {
    caller: Caller,
    url: String,
}

/// Control verbs can wait on several child timeouts in a row.
pub const CONTROL_TIMEOUT: Duration = Duration::from_secs(120);

impl SessionClient {
    pub fn new(caller: Caller, url: impl Into<String>) -> Self {
        Self {
            caller: caller.with_timeout(CONTROL_TIMEOUT),
            url: url.into(),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.caller = self.caller.with_timeout(timeout);
        self
    }

    pub async fn open(&self, partition_id: &str, user: &str) -> Result<Session, WireError> {
        let body = OpenSession {
            partition_id: partition_id.into(),
            user: user.into(),
        };
        expect_body!(self.caller.call(&self.url, Kind::Command, body).await?, Session)
    }

    pub async fn control(&self, session_id: &str, verb: &str) -> Result<SessionReport, WireError> {
        let body = ControlSession {
            session_id: session_id.into(),
            verb: verb.into(),
        };
        let env = self.caller.envelope(Kind::Command, &self.url, body).with_session(session_id);
        expect_body!(self.caller.send(&self.url, &env).await?, SessionReport)
    }

    pub async fn close(&self, session_id: &str) -> Result<(), WireError> {
        let body = Body::CloseSession(SessionRef {
            session_id: session_id.into(),
        });
        let env = self.caller.envelope(Kind::Command, &self.url, body).with_session(session_id);
        expect_body!(self.caller.send(&self.url, &env).await?, Ack).map(drop)
    }

    pub async fn list(&self) -> Result<Vec<Session>, WireError> {
        expect_body!(self.caller.call(&self.url, Kind::Query, Body::ListSessions(Empty {})).await?, Sessions)
            .map(|s| s.sessions)
    }

    pub async fn describe(&self, session_id: &str) -> Result<SessionView, WireError> {
        let body = Body::DescribeSession(SessionRef {
            session_id: session_id.into(),
        });
        expect_body!(self.caller.call(&self.url, Kind::Query, body).await?, SessionView)
    }

    pub async fn proposals(&self) -> Result<Vec<Suggestion>, WireError> {
        expect_body!(self.caller.call(&self.url, Kind::Query, Body::ListProposals(Empty {})).await?, Proposals)
            .map(|p| p.proposals)
    }
}

#[derive(Clone)]
pub struct JobClient {
    caller: Caller,
    url: String,
}

impl JobClient {
    pub fn new(caller: Caller, url: impl Into<String>) -> Self {
        Self { caller, url: url.into() }
    }

    pub async fn start(&self, spec: JobSpec) -> Result<JobStatus, WireError> {
        expect_body!(self.caller.call(&self.url, Kind::Command, spec).await?, JobStatus)
    }

    pub async fn stop(&self, id: &str, grace: Duration) -> Result<JobStatus, WireError> {
        let body = StopJob {
            id: id.into(),
            grace_ms: grace.as_millis() as u64,
        };
        expect_body!(self.caller.call(&self.url, Kind::Command, body).await?, JobStatus)
    }

    pub async fn status(&self, id: &str) -> Result<JobStatus, WireError> {
        let body = JobRef { id: id.into() };
        expect_body!(self.caller.call(&self.url, Kind::Query, body).await?, JobStatus)
    }

    pub async fn list(&self) -> Result<Vec<JobStatus>, WireError> {
        expect_body!(self.caller.call(&self.url, Kind::Query, Body::ListJobs(Empty {})).await?, Jobs)
            .map(|j| j.jobs)
    }
}
