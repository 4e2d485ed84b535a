//! Information and monitor service: stores published messages, then
//! forwards them to matching subscribers.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::time::Duration;

use async_trait::async_trait;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use futures::stream::{self, StreamExt};
use parking_lot::RwLock;
use rcms_client::{Caller, Heartbeat, RegistryClient};
use rcms_core::ims::{BackendError, CompiledCriteria, Criteria, MessageQuery, SharedStore, StorageBackend, StoredMessage};
use rcms_core::model::{LogMessage, Severity, Subscription};
use rcms_core::registry::{ServiceRecord, DEFAULT_HEARTBEAT};
use rcms_core::time::Timestamp;
use rcms_core::wire::*;
use serde::Deserialize;
use tokio::sync::{broadcast, mpsc};
use tokio::task::JoinHandle;
use tokio_stream::wrappers::BroadcastStream;

use crate::server::{bind, envelope_endpoint, serve_on, EnvelopeHandler, Reply, ServerHandle};

pub const SERVICE_NAME: &str = "ims";

#[derive(Debug, Clone, Copy)]
pub struct ImsConfig {
    pub queue_capacity: usize,
    pub retries: u32,
    pub backoff: Duration,
}

impl Default for ImsConfig {
    fn default() -> Self {
        Self {
            queue_capacity: 10_000,
            retries: 3,
            backoff: Duration::from_secs(1),
        }
    }
}

struct SubState {
    sub: Subscription,
    live: CompiledCriteria,
    tx: mpsc::Sender<StoredMessage>,
    delivered: AtomicU64,
    dropped: AtomicU64,
    retries: AtomicU64,
    /// Set while the last message could not be delivered.
    failing: AtomicBool,
    worker: parking_lot::Mutex<Option<JoinHandle<()>>>,
}

impl Drop for SubState {
    fn drop(&mut self) {
        if let Some(w) = self.worker.lock().take() {
            w.abort();
        }
    }
}

impl SubState {
    fn stats(&self) -> DeliveryStats {
        DeliveryStats {
            subscription_id: self.sub.id.clone(),
            delivered: self.delivered.load(Ordering::Relaxed),
            dropped: self.dropped.load(Ordering::Relaxed),
            queued: (self.tx.max_capacity() - self.tx.capacity()) as u64,
            retries: self.retries.load(Ordering::Relaxed),
        }
    }
}

/// One service instance. Several instances may share a store; each keeps
/// its own subscriptions.
pub struct ImsInstance {
    id: String,
    store: Arc<dyn StorageBackend>,
    caller: Caller,
    config: ImsConfig,
    ingest: tokio::sync::Mutex<()>,
    subs: RwLock<BTreeMap<String, Arc<SubState>>>,
    stream: broadcast::Sender<StoredMessage>,
    next_sub: AtomicU64,
    me: Weak<ImsInstance>,
}

fn backend_error(e: &BackendError) -> ErrorBody {
    match e {
        BackendError::MalformedCriteria(c) => ErrorBody::new("MalformedCriteria", c.to_string()),
        other => ErrorBody::new("BackendFailure", other.to_string()),
    }
}

impl ImsInstance {
    pub fn new(id: impl Into<String>, store: Arc<dyn StorageBackend>, caller: Caller, config: ImsConfig) -> Arc<Self> {
        let (stream, _) = broadcast::channel(4096);
        Arc::new_cyclic(|me| Self {
            id: id.into(),
            store,
            caller,
            config,
            ingest: tokio::sync::Mutex::new(()),
            subs: RwLock::new(BTreeMap::new()),
            stream,
            next_sub: AtomicU64::new(1),
            me: me.clone(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn store(&self) -> &Arc<dyn StorageBackend> {
        &self.store
    }

    /// Appends, then enqueues to matching subscriptions. The ingest lock
    /// keeps each queue in seq order.
    pub async fn publish(&self, msg: LogMessage) -> Result<StoredMessage, BackendError> {
        self.ingest(msg, None).await
    }

    async fn ingest(&self, msg: LogMessage, internal: Option<&str>) -> Result<StoredMessage, BackendError> {
        let _order = self.ingest.lock().await;
        let stored = self.store.append(msg, Timestamp::now(), &self.id).await?;
        for s in self.subs.read().values() {
            if internal.is_some() && (Some(s.sub.id.as_str()) == internal || s.failing.load(Ordering::Relaxed)) {
                continue;
            }
            if !s.live.matches(&stored.msg) {
                continue;
            }
            if s.tx.try_send(stored.clone()).is_err() {
                s.dropped.fetch_add(1, Ordering::Relaxed);
            }
        }
        let _ = self.stream.send(stored.clone());
        Ok(stored)
    }

    pub async fn subscribe(&self, mut sub: Subscription) -> Result<Subscribed, ErrorBody> {
        let full = Criteria::from(&sub);
        full.compile().map_err(|e| ErrorBody::new("MalformedCriteria", e.to_string()))?;
        let live = Criteria { since: None, ..full.clone() }
            .compile()
            .map_err(|e| ErrorBody::new("MalformedCriteria", e.to_string()))?;
        let probe = self.caller.envelope(Kind::Event, &sub.callback_url, Body::Probe(Empty {}));
        if let Err(e) = self.caller.transport().push(&sub.callback_url, &probe).await {
            return Err(ErrorBody::new(
                "CallbackUnreachable",
                format!("{} did not answer the probe: {e}", sub.callback_url),
            ));
        }
        if sub.id.is_empty() {
            sub.id = format!("{}/sub-{}", self.id, self.next_sub.fetch_add(1, Ordering::Relaxed));
        }
        let (tx, rx) = mpsc::channel(self.config.queue_capacity);
        let state = Arc::new(SubState {
            sub: sub.clone(),
            live,
            tx,
            delivered: AtomicU64::new(0),
            dropped: AtomicU64::new(0),
            retries: AtomicU64::new(0),
            failing: AtomicBool::new(false),
            worker: parking_lot::Mutex::new(None),
        });
        let horizon = {
            let _order = self.ingest.lock().await;
            let h = self.store.last_seq().await.map_err(|e| backend_error(&e))?;
            self.subs.write().insert(sub.id.clone(), state.clone());
            h
        };
        let backfill = match sub.since {
            Some(_) if horizon > 0 => {
                let q = MessageQuery {
                    criteria: full,
                    limit: None,
                    after_seq: 0,
                    until_seq: Some(horizon),
                };
                match self.store.query(&q).await {
                    Ok(v) => v,
                    Err(e) => {
                        self.subs.write().remove(&sub.id);
                        return Err(backend_error(&e));
                    }
                }
            }
            _ => Vec::new(),
        };
        let n = backfill.len() as u64;
        let worker = tokio::spawn(deliver_loop(self.me.clone(), Arc::downgrade(&state), backfill, rx));
        *state.worker.lock() = Some(worker);
        Ok(Subscribed {
            subscription_id: sub.id,
            backfill: n,
        })
    }

    pub fn unsubscribe(&self, id: &str) -> bool {
        self.subs.write().remove(id).is_some()
    }

    pub fn stats(&self, id: &str) -> Option<DeliveryStats> {
        self.subs.read().get(id).map(|s| s.stats())
    }

    pub fn subscriptions(&self) -> Vec<Subscription> {
        self.subs.read().values().map(|s| s.sub.clone()).collect()
    }

    pub async fn query(&self, q: &MessageQuery) -> Result<Vec<StoredMessage>, BackendError> {
        q.validate()?;
        self.store.query(q).await
    }

    pub fn router(self: &Arc<Self>) -> Router {
        let handler: Arc<dyn EnvelopeHandler> = self.clone();
        Router::new()
            .route(ENVELOPE_PATH, post(envelope_endpoint))
            .with_state(handler)
            .merge(Router::new().route(STREAM_PATH, get(stream_endpoint)).with_state(self.clone()))
    }

    pub async fn spawn(self: &Arc<Self>, addr: &str) -> std::io::Result<ServerHandle> {
        serve_on(bind(addr).await?, self.router())
    }

    /// Registers under "ims" and keeps the record alive.
    pub async fn register(&self, registry: &RegistryClient, url: &str) -> Result<Heartbeat, WireError> {
        let rec = ServiceRecord::new(SERVICE_NAME, self.id.clone(), url);
        registry.heartbeat(rec, DEFAULT_HEARTBEAT).await
    }
}

async fn deliver_loop(
    ims: Weak<ImsInstance>,
    state: Weak<SubState>,
    backfill: Vec<StoredMessage>,
    mut rx: mpsc::Receiver<StoredMessage>,
) {
    let mut backfill = backfill.into_iter();
    loop {
        let next = match backfill.next() {
            Some(m) => m,
            None => match rx.recv().await {
                Some(m) => m,
                None => return,
            },
        };
        let (Some(ims), Some(state)) = (ims.upgrade(), state.upgrade()) else {
            return;
        };
        ims.deliver(&state, next).await;
    }
}

impl ImsInstance {
    async fn deliver(&self, s: &SubState, m: StoredMessage) {
        let url = &s.sub.callback_url;
        let seq = m.seq;
        let env = self.caller.envelope(Kind::Event, url, m);
        let mut last_err = None;
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                s.retries.fetch_add(1, Ordering::Relaxed);
                tokio::time::sleep(self.config.backoff).await;
            }
            match self.caller.transport().push(url, &env).await {
                Ok(()) => {
                    s.delivered.fetch_add(1, Ordering::Relaxed);
                    s.failing.store(false, Ordering::Relaxed);
                    return;
                }
                Err(e) => last_err = Some(e),
            }
        }
        s.failing.store(true, Ordering::Relaxed);
        let dropped = s.dropped.fetch_add(1, Ordering::Relaxed) + 1;
        let text = format!(
            "subscription {} dropped seq {seq} after {} retries ({}); {dropped} dropped so far",
            s.sub.id,
            self.config.retries,
            last_err.map(|e| e.to_string()).unwrap_or_default()
        );
        let warn = LogMessage::new(format!("ims/{}", self.id), "delivery", Severity::Warn, text);
        if let Err(e) = self.ingest(warn, Some(&s.sub.id)).await {
            tracing::warn!("cannot record delivery drop: {e}");
        }
    }
}

#[async_trait]
impl EnvelopeHandler for ImsInstance {
    fn name(&self) -> String {
        self.id.clone()
    }

    async fn handle(&self, env: Envelope) -> Reply {
        let me = self.id.as_str();
        match (&env.kind, &env.body) {
            (Kind::Publish, Body::LogMessage(msg)) => match self.publish(msg.clone()).await {
                Ok(stored) => Reply::to(&env, me, Kind::Ack, Published { seq: stored.seq }),
                Err(e) => {
                    let mut r = Reply::error(&env, me, backend_error(&e));
                    r.status = StatusCode::SERVICE_UNAVAILABLE;
                    r
                }
            },
            (Kind::Subscribe, Body::Subscription(sub)) => match self.subscribe(sub.clone()).await {
                Ok(s) => Reply::to(&env, me, Kind::Result, s),
                Err(e) => Reply::error(&env, me, e),
            },
            (Kind::Unsubscribe, Body::Unsubscribe(r)) => {
                let note = (!self.unsubscribe(&r.subscription_id)).then(|| "no such subscription".to_string());
                Reply::to(&env, me, Kind::Ack, Ack { note })
            }
            (Kind::Query, Body::MessageQuery(q)) => match self.query(q).await {
                Ok(messages) => Reply::to(&env, me, Kind::Result, Messages { messages }),
                Err(e) => Reply::error(&env, me, backend_error(&e)),
            },
            (Kind::Query, Body::StatsQuery(r)) => match self.stats(&r.subscription_id) {
                Some(s) => Reply::to(&env, me, Kind::Result, s),
                None => Reply::error(
                    &env,
                    me,
                    ErrorBody::new("UnknownSubscription", format!("no subscription {}", r.subscription_id)),
                ),
            },
            (Kind::Query, Body::Probe(_)) => Reply::to(
                &env,
                me,
                Kind::Result,
                ProbeOk {
                    service: SERVICE_NAME.into(),
                },
            ),
            _ => Reply::unsupported(&env, me),
        }
    }
}

#[derive(Deserialize)]
struct StreamParams {
    criteria: Option<String>,
    after_seq: Option<u64>,
}

/// Server-sent events: stored backfill after `after_seq` if given, then
/// live messages. Each event carries `id: <seq>` and one event envelope.
async fn stream_endpoint(State(ims): State<Arc<ImsInstance>>, Query(p): Query<StreamParams>) -> Response {
    let criteria: Criteria = match p.criteria.as_deref().map(serde_json::from_str).transpose() {
        Ok(c) => c.unwrap_or_default(),
        Err(e) => return (StatusCode::BAD_REQUEST, format!("MalformedCriteria: {e}")).into_response(),
    };
    let compiled = match criteria.compile() {
        Ok(c) => c,
        Err(e) => return (StatusCode::BAD_REQUEST, format!("MalformedCriteria: {e}")).into_response(),
    };
    let live = BroadcastStream::new(ims.stream.subscribe());
    let backfill = match p.after_seq {
        Some(after) => match ims.store.query(&MessageQuery::new(criteria).after(after)).await {
            Ok(m) => m,
            Err(e) => return (StatusCode::SERVICE_UNAVAILABLE, e.to_string()).into_response(),
        },
        None => Vec::new(),
    };
    let floor = backfill.last().map(|m| m.seq).or(p.after_seq).unwrap_or(0);
    let source = ims.id.clone();
    let live = live.filter_map(move |r| {
        let keep = match r {
            Ok(m) if m.seq > floor && compiled.matches(&m.msg) => Some(m),
            Ok(_) => None,
            Err(e) => {
                tracing::warn!("stream consumer lagging: {e}");
                None
            }
        };
        futures::future::ready(keep)
    });
    let events = stream::iter(backfill).chain(live).map(move |m| sse_event(&source, m));
    Sse::new(events).keep_alive(KeepAlive::default()).into_response()
}

fn sse_event(source: &str, m: StoredMessage) -> Result<Event, Infallible> {
    let id = m.seq.to_string();
    let env = Envelope::new(Kind::Event, source, "stream", m);
    let data = env.encode().map(|b| String::from_utf8_lossy(&b).into_owned()).unwrap_or_default();
    Ok(Event::default().id(id).data(data))
}

/// `k` instances over one shared store, each on its own port.
pub struct ImsCluster {
    pub instances: Vec<Arc<ImsInstance>>,
    servers: Vec<ServerHandle>,
    _heartbeats: Vec<Heartbeat>,
}

impl ImsCluster {
    pub async fn spawn(
        k: usize,
        store: &SharedStore,
        caller: Caller,
        config: ImsConfig,
        registry: Option<&RegistryClient>,
    ) -> Result<ImsCluster, ErrorBody> {
        let mut instances = Vec::new();
        let mut servers = Vec::new();
        let mut heartbeats = Vec::new();
        for i in 0..k {
            let backend = store.connect().map_err(|e| backend_error(&e))?;
            let ims = ImsInstance::new(format!("ims-{i}"), backend, caller.clone(), config);
            let server = ims
                .spawn("127.0.0.1:0")
                .await
                .map_err(|e| ErrorBody::new("PortExhaustion", e.to_string()))?;
            if let Some(reg) = registry {
                let hb = ims
                    .register(reg, &server.url())
                    .await
                    .map_err(|e| ErrorBody::new("RegistryUnavailable", e.to_string()))?;
                heartbeats.push(hb);
            }
            instances.push(ims);
            servers.push(server);
        }
        Ok(ImsCluster {
            instances,
            servers,
            _heartbeats: heartbeats,
        })
    }

    pub fn urls(&self) -> Vec<String> {
        self.servers.iter().map(|s| s.url()).collect()
    }

    pub async fn shutdown(self) {
        for s in self.servers {
            s.shutdown().await;
        }
    }
}
