//! Session manager: owns sessions, builds one function manager per
//! partition node and runs expanded command plans through the root.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use async_trait::async_trait;
use parking_lot::Mutex;
use rcms_client::{Caller, MessageSink, ResourceClient};
use rcms_core::control::{
    ChildOutcome, ControlError, ExpansionTable, FailureCode, FanoutResult, Outcome, Selector, SessionReport, Strategy,
};
use rcms_core::fsm::{FsmCommand, Verb};
use rcms_core::model::{LogMessage, Partition, Resource, Session, Severity};
use rcms_core::time::Timestamp;
use rcms_core::wire::*;

use crate::fm::{ChildKind, ChildRef, FmConfig, FunctionManager};
use crate::server::{serve_handler, EnvelopeHandler, Reply, ServerHandle};

const NAME: &str = "session-manager";

struct ActiveSession {
    session: Mutex<Session>,
    partitions: Vec<Partition>,
    resources: Vec<Resource>,
    root: Arc<FunctionManager>,
    servers: Mutex<Vec<ServerHandle>>,
    /// Serializes plans; `true` once closed.
    plan: tokio::sync::Mutex<bool>,
}

pub struct SessionManager {
    resources: ResourceClient,
    caller: Caller,
    sink: Arc<dyn MessageSink>,
    table: ExpansionTable,
    config: FmConfig,
    sessions: Mutex<BTreeMap<String, Arc<ActiveSession>>>,
    closed: Mutex<BTreeSet<String>>,
    proposals: Mutex<Vec<Suggestion>>,
    next_id: AtomicU64,
}

fn control_error(e: &ControlError) -> ErrorBody {
    ErrorBody::new(e.code(), e.to_string())
}

fn session_closed(id: &str) -> ErrorBody {
    ErrorBody::new("SessionClosed", format!("session {id} is not open"))
}

impl SessionManager {
    pub fn new(
        caller: Caller,
        resources: ResourceClient,
        sink: Arc<dyn MessageSink>,
        table: ExpansionTable,
        config: FmConfig,
    ) -> Arc<Self> {
        Arc::new(Self {
            resources,
            caller,
            sink,
            table,
            config,
            sessions: Mutex::new(BTreeMap::new()),
            closed: Mutex::new(BTreeSet::new()),
            proposals: Mutex::new(Vec::new()),
            next_id: AtomicU64::new(1),
        })
    }

    pub async fn spawn(self: &Arc<Self>, addr: &str) -> std::io::Result<ServerHandle> {
        serve_handler(self.clone(), addr).await
    }

    fn active(&self, id: &str) -> Result<Arc<ActiveSession>, ErrorBody> {
        self.sessions.lock().get(id).cloned().ok_or_else(|| session_closed(id))
    }

    async fn log(&self, severity: Severity, session_id: &str, text: String) {
        let msg = LogMessage::new(format!("{NAME}/{session_id}"), "control", severity, text);
        self.sink.publish(msg).await;
    }

    pub async fn open(&self, partition_id: &str, user: &str) -> Result<Session, ErrorBody> {
        let id = format!("session-{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        self.resources
            .allocate(partition_id, &id)
            .await
            .map_err(|e| e.remote().cloned().unwrap_or_else(|| ErrorBody::new(e.code(), e.to_string())))?;
        match self.build(&id, partition_id, user).await {
            Ok(active) => {
                let session = active.session.lock().clone();
                self.sessions.lock().insert(id, Arc::new(active));
                Ok(session)
            }
            Err(err) => {
                if let Err(e) = self.resources.release(&id).await {
                    tracing::warn!(session = %id, "release after failed open: {e}");
                }
                Err(err)
            }
        }
    }

    async fn build(&self, id: &str, partition_id: &str, user: &str) -> Result<ActiveSession, ErrorBody> {
        let tree = self
            .resources
            .describe(partition_id)
            .await
            .map_err(|e| e.remote().cloned().unwrap_or_else(|| ErrorBody::new(e.code(), e.to_string())))?;
        let parts: BTreeMap<&str, &Partition> = tree.partitions.iter().map(|p| (p.id.as_str(), p)).collect();
        let by_id: BTreeMap<&str, &Resource> = tree.resources.iter().map(|r| (r.id.as_str(), r)).collect();

        // A resource shared by several partitions belongs to the first that
        // lists it in pre-order.
        let mut owner: BTreeMap<String, String> = BTreeMap::new();
        let mut order = Vec::new();
        preorder(partition_id, &parts, &mut order);
        for pid in &order {
            for rid in &parts[pid.as_str()].resource_ids {
                owner.entry(rid.clone()).or_insert_with(|| pid.clone());
            }
        }

        let mut servers = Vec::new();
        let root = match self
            .build_fm(id, partition_id, &parts, &by_id, &owner, true, &mut servers)
            .await?
        {
            Some(Built::Local(fm)) => fm,
            _ => unreachable!("the root is built in-process or not at all"),
        };
        root.fanout(&FanoutAction::QueryState, &Selector::All).await;
        let session = Session {
            id: id.to_string(),
            partition_id: partition_id.to_string(),
            state: root.state(),
            users: vec![user.to_string()],
            created_at: Timestamp::now(),
        };
        Ok(ActiveSession {
            session: Mutex::new(session),
            partitions: tree.partitions.clone(),
            resources: tree.resources.clone(),
            root,
            servers: Mutex::new(servers),
            plan: tokio::sync::Mutex::new(false),
        })
    }

    /// Builds the FM for `pid` after its children. Child FMs are served
    /// over HTTP; the root stays in-process. Partitions left with nothing
    /// to control get no FM.
    #[allow(clippy::too_many_arguments)]
    fn build_fm<'a>(
        &'a self,
        session_id: &'a str,
        pid: &'a str,
        parts: &'a BTreeMap<&str, &Partition>,
        by_id: &'a BTreeMap<&str, &Resource>,
        owner: &'a BTreeMap<String, String>,
        is_root: bool,
        servers: &'a mut Vec<ServerHandle>,
    ) -> futures::future::BoxFuture<'a, Result<Option<Built>, ErrorBody>> {
        Box::pin(async move {
            let p = parts[pid];
            let mut children = Vec::new();
            for child in &p.children {
                if !parts.contains_key(child.as_str()) {
                    continue;
                }
                if let Some(Built::Remote(c)) =
                    self.build_fm(session_id, child, parts, by_id, owner, false, servers).await?
                {
                    children.push(c);
                }
            }
            for rid in &p.resource_ids {
                if owner.get(rid).map(String::as_str) != Some(pid) {
                    continue;
                }
                if let Some(r) = by_id.get(rid.as_str()) {
                    children.push(ChildRef::leaf(&r.id, &r.uri, r.role().map(String::from)));
                }
            }
            if children.is_empty() {
                if is_root {
                    return Err(control_error(&ControlError::NoChildren));
                }
                return Ok(None);
            }
            let mut config = self.config;
            if config.strategy == Strategy::Hierarchical && children.iter().any(|c| c.kind == ChildKind::Leaf) {
                config.strategy = Strategy::BoundedParallel;
            }
            let fm_id = format!("{session_id}/fm/{pid}");
            let fm = FunctionManager::new(fm_id.clone(), pid, children, config, self.caller.clone())
                .map_err(|e| control_error(&e))?;
            if is_root {
                return Ok(Some(Built::Local(fm)));
            }
            let server = serve_handler(fm.clone(), "127.0.0.1:0")
                .await
                .map_err(|e| control_error(&ControlError::FmSpawnFailure(format!("{fm_id}: {e}"))))?;
            let child = ChildRef::fm(fm_id, server.url(), fm.leaves());
            servers.push(server);
            Ok(Some(Built::Remote(child)))
        })
    }

    pub async fn control(&self, session_id: &str, verb: &str) -> Result<SessionReport, ErrorBody> {
        let active = self.active(session_id)?;
        let closed = active.plan.lock().await;
        if *closed {
            return Err(session_closed(session_id));
        }
        let root_partition = active
            .partitions
            .iter()
            .find(|p| p.id == active.root.partition_id())
            .cloned()
            .unwrap_or_else(|| Partition::new(active.root.partition_id(), Vec::<String>::new()));
        let plan = self
            .table
            .expand(verb, &root_partition, &active.resources)
            .map_err(|e| control_error(&e))?;

        let start = Instant::now();
        let mut outcomes: Vec<ChildOutcome> = Vec::new();
        let mut failed: BTreeSet<String> = BTreeSet::new();
        let mut steps_run = 0;
        let total = plan.steps.len();
        for (i, step) in plan.steps.iter().enumerate() {
            let result: FanoutResult = active
                .root
                .fanout(&FanoutAction::Command(step.command.clone()), &step.selector)
                .await;
            steps_run += 1;
            let bad = result.failed();
            self.log(
                Severity::Info,
                session_id,
                format!(
                    "{verb} step {}/{total}: {} -> {}: {} ok, {} failed",
                    i + 1,
                    step.command.verb,
                    step.selector,
                    result.outcomes.len() - bad.len(),
                    bad.len()
                ),
            )
            .await;
            failed.extend(bad);
            let stop = result.is_partial_failure();
            outcomes.extend(result.outcomes);
            if stop {
                break;
            }
        }
        let state = active.root.state();
        active.session.lock().state = state;
        Ok(SessionReport {
            session_id: session_id.to_string(),
            verb: verb.to_string(),
            state,
            steps_run,
            outcomes,
            failed: failed.into_iter().collect(),
            elapsed_us: start.elapsed().as_micros() as u64,
        })
    }

    /// Halts what answers, tears down the FMs and releases the allocation.
    /// Closing an already closed session is a no-op.
    pub async fn close(&self, session_id: &str) -> Result<Ack, ErrorBody> {
        let active = match self.active(session_id) {
            Ok(a) => a,
            Err(e) => {
                if self.closed.lock().contains(session_id) {
                    return Ok(Ack {
                        note: Some("already closed".into()),
                    });
                }
                return Err(e);
            }
        };
        let mut closed = active.plan.lock().await;
        if *closed {
            return Ok(Ack {
                note: Some("already closed".into()),
            });
        }
        *closed = true;
        let halt = FanoutAction::Command(FsmCommand::new(Verb::Halt));
        let result = active.root.fanout(&halt, &Selector::All).await;
        for o in &result.outcomes {
            if let Outcome::Err { code, message } = &o.outcome {
                // Leaves that are already halted refuse the halt; that is fine.
                if *code != FailureCode::IllegalTransition {
                    self.log(Severity::Warn, session_id, format!("halt on close failed for {}: {message}", o.child))
                        .await;
                }
            }
        }
        let servers = std::mem::take(&mut *active.servers.lock());
        for s in servers {
            s.shutdown().await;
        }
        if let Err(e) = self.resources.release(session_id).await {
            self.log(Severity::Warn, session_id, format!("release on close failed: {e}")).await;
        }
        self.sessions.lock().remove(session_id);
        self.closed.lock().insert(session_id.to_string());
        Ok(Ack::default())
    }

    pub fn list(&self) -> Vec<Session> {
        self.sessions.lock().values().map(|a| a.session.lock().clone()).collect()
    }

    pub fn describe(&self, session_id: &str) -> Result<SessionView, ErrorBody> {
        let active = self.active(session_id)?;
        let session = active.session.lock().clone();
        Ok(SessionView {
            session,
            partitions: active.partitions.clone(),
            leaf_states: active.root.leaf_states(),
        })
    }

    pub fn proposals(&self) -> Vec<Suggestion> {
        self.proposals.lock().clone()
    }

    /// Closes every open session.
    pub async fn shutdown(&self) {
        let ids: Vec<String> = self.sessions.lock().keys().cloned().collect();
        for id in ids {
            let _ = self.close(&id).await;
        }
    }
}

enum Built {
    Local(Arc<FunctionManager>),
    Remote(ChildRef),
}

fn preorder(id: &str, parts: &BTreeMap<&str, &Partition>, out: &mut Vec<String>) {
    let Some(p) = parts.get(id) else { return };
    out.push(id.to_string());
    for c in &p.children {
        preorder(c, parts, out);
    }
}

#[async_trait]
impl EnvelopeHandler for SessionManager {
    fn name(&self) -> String {
        NAME.into()
    }

    async fn handle(&self, env: Envelope) -> Reply {
        let result: Result<(Kind, Body), ErrorBody> = match (&env.kind, &env.body) {
            (Kind::Command, Body::OpenSession(o)) => {
                self.open(&o.partition_id, &o.user).await.map(|s| (Kind::Result, s.into()))
            }
            (Kind::Command, Body::ControlSession(c)) => {
                self.control(&c.session_id, &c.verb).await.map(|r| (Kind::Result, r.into()))
            }
            (Kind::Command, Body::CloseSession(s)) => self.close(&s.session_id).await.map(|a| (Kind::Ack, a.into())),
            (Kind::Query, Body::ListSessions(_)) => Ok((Kind::Result, Sessions { sessions: self.list() }.into())),
            (Kind::Query, Body::DescribeSession(s)) => self.describe(&s.session_id).map(|v| (Kind::Result, v.into())),
            (Kind::Query, Body::ListProposals(_)) => Ok((
                Kind::Result,
                Proposals {
                    proposals: self.proposals(),
                }
                .into(),
            )),
            (Kind::Query, Body::FsmTableQuery(_)) => Ok((Kind::Result, FsmTable::current().into())),
            (Kind::Query, Body::Probe(_)) => Ok((Kind::Result, ProbeOk { service: NAME.into() }.into())),
            (Kind::Event, Body::Suggestion(s)) => {
                tracing::info!(rule = %s.rule_id, "proposal received");
                self.proposals.lock().push(s.clone());
                return Reply::status(axum::http::StatusCode::NO_CONTENT);
            }
            _ => return Reply::unsupported(&env, NAME),
        };
        match result {
            Ok((kind, body)) => Reply::to(&env, NAME, kind, body),
            Err(e) => Reply::error(&env, NAME, e),
        }
    }
}
