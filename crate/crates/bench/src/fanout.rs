//! Time for one FSM transition across `n` nodes, per strategy.

use std::time::{Duration, Instant};

use rcms_client::{Caller, HttpTransport, RegistryClient};
use rcms_core::control::{default_branching, FanoutResult, Selector, Strategy};
use rcms_core::fsm::{FsmCommand, FsmState, Verb};
use rcms_core::wire::FanoutAction;
use rcms_service::fm::{ChildRef, FmConfig, FunctionManager, Hierarchy};
use rcms_service::registry::RegistryService;
use rcms_service::simnode::{register_nodes, spawn_nodes, NodeSpec, SimNodeHandle};

use crate::report::{BenchError, BenchResult, Params};
use crate::MIN_REPS;

pub const EXPERIMENT: &str = "fanout";
/// Work each node does per command.
pub const DEFAULT_DELAY: Duration = Duration::from_millis(10);

#[derive(Debug, Clone)]
pub struct FanoutBench {
    pub ns: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub reps: usize,
    pub delay: Duration,
    pub worker_limit: usize,
    /// Intermediate FMs for the hierarchical strategy; ⌈√n⌉ when unset.
    pub branching: Option<usize>,
}

impl Default for FanoutBench {
    fn default() -> Self {
        Self {
            ns: (1..=12).map(|i| i * 10).collect(),
            strategies: Strategy::ALL.to_vec(),
            reps: MIN_REPS,
            delay: DEFAULT_DELAY,
            worker_limit: FmConfig::default().worker_limit,
            branching: None,
        }
    }
}

/// Either a flat FM or a two-level tree, ready to command.
enum Controller {
    Flat(std::sync::Arc<FunctionManager>),
    Tree(Hierarchy),
}

impl Controller {
    async fn build(strategy: Strategy, leaves: &[ChildRef], b: &FanoutBench, caller: Caller) -> Result<Self, BenchError> {
        let config = FmConfig {
            strategy,
            worker_limit: b.worker_limit,
            ..FmConfig::default()
        };
        let setup = |e: rcms_core::control::ControlError| BenchError::Setup(e.to_string());
        Ok(match strategy {
            Strategy::Hierarchical => {
                let branching = b.branching.unwrap_or_else(|| default_branching(leaves.len()));
                Controller::Tree(
                    Hierarchy::build("bench", leaves, branching, config, caller)
                        .await
                        .map_err(setup)?,
                )
            }
            _ => Controller::Flat(FunctionManager::new("bench", "bench", leaves.to_vec(), config, caller).map_err(setup)?),
        })
    }

    async fn fanout(&self, action: &FanoutAction) -> FanoutResult {
        let fm = match self {
            Controller::Flat(fm) => fm,
            Controller::Tree(h) => &h.root,
        };
        fm.fanout(action, &Selector::All).await
    }

    async fn shutdown(self) {
        if let Controller::Tree(h) = self {
            h.shutdown().await;
        }
    }
}

/// A sample counts only if every node acknowledged and reached `want`.
async fn verify(result: &FanoutResult, nodes: &[SimNodeHandle], want: FsmState) -> bool {
    if result.is_partial_failure() || result.outcomes.len() != nodes.len() {
        return false;
    }
    for n in nodes {
        if n.node.state().await != want {
            return false;
        }
    }
    true
}

/// Spawns the nodes, registers them with a local registry and resolves
/// the leaves back through it, then times alternating initialize / reset
/// commands. One untimed warm-up precedes each data point.
pub async fn bench_fanout(b: &FanoutBench) -> Result<Vec<BenchResult>, BenchError> {
    if b.reps < MIN_REPS {
        return Err(BenchError::TooFewReps(b.reps));
    }
    let max_n = b.ns.iter().copied().max().unwrap_or(0);
    let spec = NodeSpec {
        delay: b.delay,
        ..NodeSpec::default()
    };
    let nodes = spawn_nodes(max_n, &spec)
        .await
        .map_err(|e| BenchError::PortExhaustion(e.message))?;

    let registry = RegistryService::new(Duration::from_secs(600));
    let reg_server = registry
        .spawn("127.0.0.1:0")
        .await
        .map_err(|e| BenchError::PortExhaustion(e.to_string()))?;
    let caller = Caller::new(HttpTransport::shared(), "bench");
    let reg = RegistryClient::new(caller.clone(), reg_server.url());
    register_nodes(&nodes, &reg)
        .await
        .map_err(|e| BenchError::RegistryUnavailable(e.to_string()))?;
    let records = reg
        .lookup("simnode")
        .await
        .map_err(|e| BenchError::RegistryUnavailable(e.to_string()))?;
    if records.len() != nodes.len() {
        return Err(BenchError::RegistryUnavailable(format!(
            "{} of {} nodes registered",
            records.len(),
            nodes.len()
        )));
    }
    let leaves: Vec<ChildRef> = records
        .iter()
        .map(|r| ChildRef::leaf(&r.instance_id, &r.url, Some("readout".into())))
        .collect();

    let init = FanoutAction::Command(FsmCommand::new(Verb::Initialize));
    let reset = FanoutAction::Command(FsmCommand::new(Verb::Reset));
    let mut out = Vec::new();
    for &n in &b.ns {
        let nodes = &nodes[..n];
        for &strategy in &b.strategies {
            let params = Params {
                n: Some(n),
                strategy: Some(strategy),
                ..Params::default()
            };
            let mut result = BenchResult::new(EXPERIMENT, params, "ms");
            for node in nodes {
                node.node.set_state(FsmState::Initial).await;
            }
            let ctl = Controller::build(strategy, &leaves[..n], b, caller.clone()).await?;
            let mut state = FsmState::Initial;
            let mut rep = 0;
            while rep <= b.reps {
                let (action, want) = match state {
                    FsmState::Initial => (&init, FsmState::Halted),
                    _ => (&reset, FsmState::Initial),
                };
                let start = Instant::now();
                let r = ctl.fanout(action).await;
                let ms = start.elapsed().as_secs_f64() * 1e3;
                let ok = verify(&r, nodes, want).await;
                if ok {
                    state = want;
                    if rep > 0 {
                        result.samples.push(ms);
                    }
                } else {
                    result.failed += 1;
                    for node in nodes {
                        node.node.set_state(FsmState::Initial).await;
                    }
                    state = FsmState::Initial;
                    if result.failed > b.reps {
                        break;
                    }
                    continue;
                }
                rep += 1;
            }
            ctl.shutdown().await;
            out.push(result);
        }
    }
    reg_server.shutdown().await;
    Ok(out)
}
