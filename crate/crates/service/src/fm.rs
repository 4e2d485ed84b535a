//! Function managers: forward one command to many children and collect the
//! acknowledgements.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use parking_lot::Mutex;
use rcms_client::Caller;
use rcms_core::control::{
    self, balanced_slices, ChildOutcome, ControlError, FailureCode, FanoutResult, Outcome, Selector, Strategy,
    DEFAULT_CHILD_TIMEOUT, DEFAULT_WORKER_LIMIT,
};
use rcms_core::fsm::FsmState;
use rcms_core::wire::{Body, Empty, Envelope, Fanout, FanoutAck, FanoutAction, Kind, NodeAck, ProbeOk, WireError};

use crate::server::{serve_handler, EnvelopeHandler, Reply, ServerHandle};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChildKind {
    Leaf,
    Fm,
}

#[derive(Debug, Clone)]
pub struct ChildRef {
    pub id: String,
    pub url: String,
    pub kind: ChildKind,
    pub role: Option<String>,
    /// Leaf ids reachable through this child, itself for a leaf.
    pub leaves: Vec<String>,
}

impl ChildRef {
    pub fn leaf(id: impl Into<String>, url: impl Into<String>, role: Option<String>) -> Self {
        let id = id.into();
        Self {
            leaves: vec![id.clone()],
            id,
            url: url.into(),
            kind: ChildKind::Leaf,
            role,
        }
    }

    pub fn fm(id: impl Into<String>, url: impl Into<String>, leaves: Vec<String>) -> Self {
        Self {
            id: id.into(),
            url: url.into(),
            kind: ChildKind::Fm,
            role: None,
            leaves,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FmConfig {
    pub strategy: Strategy,
    pub worker_limit: usize,
    pub child_timeout: Duration,
}

impl Default for FmConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::BoundedParallel,
            worker_limit: DEFAULT_WORKER_LIMIT,
            child_timeout: DEFAULT_CHILD_TIMEOUT,
        }
    }
}

impl FmConfig {
    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.strategy = strategy;
        self
    }
}

pub struct FunctionManager {
    id: String,
    partition_id: String,
    children: Vec<ChildRef>,
    config: FmConfig,
    caller: Caller,
    states: Mutex<BTreeMap<String, FsmState>>,
}

impl FunctionManager {
    pub fn new(
        id: impl Into<String>,
        partition_id: impl Into<String>,
        children: Vec<ChildRef>,
        config: FmConfig,
        caller: Caller,
    ) -> Result<Arc<Self>, ControlError> {
        let id = id.into();
        if children.is_empty() {
            return Err(ControlError::NoChildren);
        }
        if config.worker_limit == 0 {
            return Err(ControlError::ZeroWorkers);
        }
        if config.strategy == Strategy::Hierarchical && children.iter().any(|c| c.kind == ChildKind::Leaf) {
            return Err(ControlError::LeafUnderHierarchical(id));
        }
        Ok(Arc::new(Self {
            id,
            partition_id: partition_id.into(),
            children,
            config,
            caller,
            states: Mutex::new(BTreeMap::new()),
        }))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn partition_id(&self) -> &str {
        &self.partition_id
    }

    pub fn children(&self) -> &[ChildRef] {
        &self.children
    }

    pub fn config(&self) -> FmConfig {
        self.config
    }

    pub fn leaves(&self) -> Vec<String> {
        self.children.iter().flat_map(|c| c.leaves.iter().cloned()).collect()
    }

    /// Last known state of every leaf that has answered.
    pub fn leaf_states(&self) -> BTreeMap<String, FsmState> {
        self.states.lock().clone()
    }

    pub fn state(&self) -> FsmState {
        control::aggregate_known(self.states.lock().values())
    }

    pub async fn fanout(&self, action: &FanoutAction, selector: &Selector) -> FanoutResult {
        let targets: Vec<ChildRef> = self
            .children
            .iter()
            .filter(|c| c.kind == ChildKind::Fm || selector.matches(c.role.as_deref()))
            .cloned()
            .collect();
        let start = Instant::now();
        let per_child: Vec<Vec<ChildOutcome>> = match self.config.strategy {
            Strategy::Sequential => {
                let mut out = Vec::with_capacity(targets.len());
                for c in targets {
                    out.push(self.dispatch(&c, action, selector).await);
                }
                out
            }
            Strategy::BoundedParallel | Strategy::Hierarchical => {
                stream::iter(targets)
                    .map(|c| async move { self.dispatch(&c, action, selector).await })
                    .buffered(self.config.worker_limit)
                    .collect()
                    .await
            }
        };
        let elapsed = start.elapsed();
        let outcomes: Vec<ChildOutcome> = per_child.into_iter().flatten().collect();
        {
            let mut states = self.states.lock();
            for o in &outcomes {
                if let Outcome::Ok { state } = o.outcome {
                    states.insert(o.child.clone(), state);
                }
            }
        }
        FanoutResult { outcomes, elapsed }
    }

    async fn dispatch(&self, child: &ChildRef, action: &FanoutAction, selector: &Selector) -> Vec<ChildOutcome> {
        match child.kind {
            ChildKind::Leaf => {
                let (kind, body) = match action {
                    FanoutAction::Command(cmd) => (Kind::Command, Body::FsmCommand(cmd.clone())),
                    FanoutAction::QueryState => (Kind::Query, Body::StateQuery(Empty {})),
                };
                let env = Envelope::new(kind, self.id.clone(), child.id.clone(), body);
                let reply = self
                    .caller
                    .transport()
                    .request(&child.url, &env, self.config.child_timeout)
                    .await
                    .and_then(Envelope::into_body);
                let outcome = match reply {
                    Ok(Body::NodeAck(a)) => Outcome::Ok { state: a.state },
                    Ok(other) => failure(FailureCode::Protocol, format!("unexpected {}", other.tag())),
                    Err(e) => failure(failure_code(&e), e.to_string()),
                };
                vec![ChildOutcome {
                    child: child.id.clone(),
                    outcome,
                }]
            }
            ChildKind::Fm => {
                let kind = match action {
                    FanoutAction::Command(_) => Kind::Command,
                    FanoutAction::QueryState => Kind::Query,
                };
                let body = Fanout {
                    action: action.clone(),
                    selector: selector.clone(),
                };
                let env = Envelope::new(kind, self.id.clone(), child.id.clone(), body);
                // A child FM needs a few rounds of its own child timeout.
                let rounds = child.leaves.len().div_ceil(self.config.worker_limit) as u32 + 1;
                let timeout = self.config.child_timeout * rounds;
                let reply = self
                    .caller
                    .transport()
                    .request(&child.url, &env, timeout)
                    .await
                    .and_then(Envelope::into_body);
                match reply {
                    Ok(Body::FanoutAck(ack)) => ack.outcomes,
                    Ok(other) => all_failed(child, FailureCode::Protocol, format!("unexpected {}", other.tag())),
                    Err(e) => all_failed(child, failure_code(&e), e.to_string()),
                }
            }
        }
    }
}

fn failure(code: FailureCode, message: String) -> Outcome {
    Outcome::Err { code, message }
}

fn all_failed(child: &ChildRef, code: FailureCode, message: String) -> Vec<ChildOutcome> {
    child
        .leaves
        .iter()
        .map(|leaf| ChildOutcome {
            child: leaf.clone(),
            outcome: failure(code, format!("via {}: {message}", child.id)),
        })
        .collect()
}

pub fn failure_code(e: &WireError) -> FailureCode {
    match e {
        WireError::Timeout(_) => FailureCode::Timeout,
        WireError::Transport(_) => FailureCode::Transport,
        WireError::Remote(b) if b.code == "IllegalTransition" => FailureCode::IllegalTransition,
        WireError::Remote(b) if b.code == "NodeFault" => FailureCode::NodeFault,
        _ => FailureCode::Protocol,
    }
}

#[async_trait]
impl EnvelopeHandler for FunctionManager {
    fn name(&self) -> String {
        self.id.clone()
    }

    async fn handle(&self, env: Envelope) -> Reply {
        let (action, selector) = match (&env.kind, &env.body) {
            (Kind::Command | Kind::Query, Body::Fanout(f)) => (f.action.clone(), f.selector.clone()),
            (Kind::Command, Body::FsmCommand(cmd)) => (FanoutAction::Command(cmd.clone()), Selector::All),
            (Kind::Query, Body::StateQuery(_)) => {
                let ack = NodeAck {
                    node_id: self.id.clone(),
                    state: self.state(),
                };
                return Reply::to(&env, &self.id, Kind::Result, ack);
            }
            (Kind::Query, Body::Probe(_)) => {
                return Reply::to(&env, &self.id, Kind::Result, ProbeOk { service: "fm".into() })
            }
            _ => return Reply::unsupported(&env, &self.id),
        };
        let result = self.fanout(&action, &selector).await;
        let kind = if env.kind == Kind::Query { Kind::Result } else { Kind::Ack };
        let ack = FanoutAck {
            outcomes: result.outcomes,
            elapsed_us: result.elapsed.as_micros() as u64,
        };
        Reply::to(&env, &self.id, kind, ack)
    }
}

/// A two-level tree over `leaves`: `branching` intermediate FMs served
/// over HTTP, each bounded-parallel over a balanced slice, under an
/// in-process hierarchical root.
pub struct Hierarchy {
    pub root: Arc<FunctionManager>,
    pub intermediates: Vec<ServerHandle>,
}

impl Hierarchy {
    pub async fn build(
        id: &str,
        leaves: &[ChildRef],
        branching: usize,
        config: FmConfig,
        caller: Caller,
    ) -> Result<Hierarchy, ControlError> {
        let mut children = Vec::new();
        let mut intermediates = Vec::new();
        for (i, slice) in balanced_slices(leaves.len(), branching).into_iter().enumerate() {
            let fm_id = format!("{id}/fm-{i:02}");
            let sub_config = FmConfig {
                strategy: Strategy::BoundedParallel,
                ..config
            };
            let fm = FunctionManager::new(fm_id.clone(), id, leaves[slice].to_vec(), sub_config, caller.clone())?;
            let server = serve_handler(fm.clone(), "127.0.0.1:0")
                .await
                .map_err(|e| ControlError::FmSpawnFailure(format!("{fm_id}: {e}")))?;
            children.push(ChildRef::fm(fm_id, server.url(), fm.leaves()));
            intermediates.push(server);
        }
        let root_config = FmConfig {
            strategy: Strategy::Hierarchical,
            ..config
        };
        let root = FunctionManager::new(format!("{id}/root"), id, children, root_config, caller)?;
        Ok(Hierarchy { root, intermediates })
    }

    pub async fn shutdown(self) {
        for s in self.intermediates {
            s.shutdown().await;
        }
    }
}
