//! Simulated controlled application: holds one FSM state and answers
//! commands after an optional delay.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::RwLock;
use rcms_client::RegistryClient;
use rcms_core::fsm::{self, FsmError, FsmState};
use rcms_core::model::{Resource, ResourceKind};
use rcms_core::registry::ServiceRecord;
use rcms_core::wire::{Body, Envelope, ErrorBody, Kind, NodeAck, ProbeOk, WireError};
use serde::{Deserialize, Serialize};

use crate::server::{serve_handler, EnvelopeHandler, Reply, ServerHandle};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailMode {
    #[default]
    None,
    /// Accepts connections but never answers.
    Drop,
    /// Refuses commands with a node fault, keeping its state.
    Error,
}

impl FromStr for FailMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(FailMode::None),
            "drop" => Ok(FailMode::Drop),
            "error" => Ok(FailMode::Error),
            _ => Err(format!("unknown fail mode {s:?}")),
        }
    }
}

impl fmt::Display for FailMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailMode::None => "none",
            FailMode::Drop => "drop",
            FailMode::Error => "error",
        })
    }
}

pub struct SimNode {
    id: String,
    state: tokio::sync::Mutex<FsmState>,
    delay: Duration,
    fail: RwLock<FailMode>,
    commands: AtomicU64,
}

impl SimNode {
    pub fn new(id: impl Into<String>, delay: Duration) -> Arc<Self> {
        Arc::new(Self {
            id: id.into(),
            state: tokio::sync::Mutex::new(FsmState::Initial),
            delay,
            fail: RwLock::new(FailMode::None),
            commands: AtomicU64::new(0),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub async fn state(&self) -> FsmState {
        *self.state.lock().await
    }

    /// Puts the node straight into `state`, bypassing the table.
    pub async fn set_state(&self, state: FsmState) {
        *self.state.lock().await = state;
    }

    pub fn set_fail_mode(&self, mode: FailMode) {
        *self.fail.write() = mode;
    }

    pub fn fail_mode(&self) -> FailMode {
        *self.fail.read()
    }

    /// Commands received, including refused ones.
    pub fn commands_seen(&self) -> u64 {
        self.commands.load(Ordering::Relaxed)
    }
}

#[async_trait]
impl EnvelopeHandler for SimNode {
    fn name(&self) -> String {
        self.id.clone()
    }

    async fn handle(&self, env: Envelope) -> Reply {
        let mode = self.fail_mode();
        if mode == FailMode::Drop {
            std::future::pending::<()>().await;
        }
        match (&env.kind, &env.body) {
            (Kind::Command, Body::FsmCommand(cmd)) => {
                self.commands.fetch_add(1, Ordering::Relaxed);
                if mode == FailMode::Error {
                    let err = ErrorBody::new("NodeFault", format!("{} injected fault", self.id));
                    return Reply::error(&env, &self.id, err);
                }
                let mut state = self.state.lock().await;
                if !self.delay.is_zero() {
                    tokio::time::sleep(self.delay).await;
                }
                match fsm::transition(*state, cmd) {
                    Ok(next) => {
                        *state = next;
                        let ack = NodeAck {
                            node_id: self.id.clone(),
                            state: next,
                        };
                        Reply::to(&env, &self.id, Kind::Ack, ack)
                    }
                    Err(e @ FsmError::IllegalTransition { .. }) => {
                        Reply::error(&env, &self.id, ErrorBody::new("IllegalTransition", e.to_string()))
                    }
                    Err(e) => Reply::error(&env, &self.id, ErrorBody::new("NodeFault", e.to_string())),
                }
            }
            (Kind::Query, Body::StateQuery(_)) => {
                let ack = NodeAck {
                    node_id: self.id.clone(),
                    state: self.state().await,
                };
                Reply::to(&env, &self.id, Kind::Result, ack)
            }
            (Kind::Query, Body::Probe(_)) => Reply::to(
                &env,
                &self.id,
                Kind::Result,
                ProbeOk {
                    service: "simnode".into(),
                },
            ),
            _ => Reply::unsupported(&env, &self.id),
        }
    }
}

pub struct SimNodeHandle {
    pub node: Arc<SimNode>,
    url: String,
    server: Option<ServerHandle>,
}

impl SimNodeHandle {
    pub fn id(&self) -> &str {
        self.node.id()
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn is_alive(&self) -> bool {
        self.server.is_some()
    }

    /// Closes the listening port; later requests fail to connect.
    pub async fn kill(&mut self) {
        if let Some(s) = self.server.take() {
            s.shutdown().await;
        }
    }

    pub fn resource(&self, role: &str) -> Resource {
        Resource::new(self.id(), ResourceKind::Software, self.url.clone()).with_attribute("role", role)
    }

    pub fn record(&self) -> ServiceRecord {
        ServiceRecord::new("simnode", self.id(), self.url.clone())
    }
}

#[derive(Debug, Clone, Default)]
pub struct NodeSpec {
    pub delay: Duration,
    /// Indices whose nodes start in `fail_mode`.
    pub fail_set: BTreeSet<usize>,
    pub fail_mode: FailMode,
    pub id_prefix: Option<String>,
}

pub async fn spawn_node(id: &str, delay: Duration) -> std::io::Result<SimNodeHandle> {
    let node = SimNode::new(id, delay);
    let server = serve_handler(node.clone(), "127.0.0.1:0").await?;
    Ok(SimNodeHandle {
        node,
        url: server.url(),
        server: Some(server),
    })
}

/// Starts `n` nodes on distinct loopback ports. Bind failures surface as
/// `PortExhaustion`.
pub async fn spawn_nodes(n: usize, spec: &NodeSpec) -> Result<Vec<SimNodeHandle>, ErrorBody> {
    if n == 0 {
        return Err(ErrorBody::new("InvalidArgument", "at least one node is required"));
    }
    let prefix = spec.id_prefix.as_deref().unwrap_or("node");
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let h = spawn_node(&format!("{prefix}-{i:03}"), spec.delay)
            .await
            .map_err(|e| ErrorBody::new("PortExhaustion", format!("node {i}: {e}")))?;
        if spec.fail_set.contains(&i) {
            h.node.set_fail_mode(spec.fail_mode);
        }
        out.push(h);
    }
    Ok(out)
}

pub async fn register_nodes(nodes: &[SimNodeHandle], registry: &RegistryClient) -> Result<(), WireError> {
    for n in nodes {
        registry.register(&n.record()).await?;
    }
    Ok(())
}
