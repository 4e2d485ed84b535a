//! Command expansion, fan-out bookkeeping and hierarchy layout.
//!
//! The network side of fan-out lives with the services; this module holds
//! the parts that are plain data: plans, per-child outcomes and reports.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsm::{self, FsmCommand, FsmState, Verb};
use crate::model::{Partition, Resource};

pub const DEFAULT_WORKER_LIMIT: usize = 8;
pub const DEFAULT_CHILD_TIMEOUT: Duration = Duration::from_secs(5);
pub const DEFAULT_SUBSYSTEM: &str = "default";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// One child at a time, waiting for each acknowledgement.
    Sequential,
    /// At most `worker_limit` requests in flight.
    BoundedParallel,
    /// One request per child function manager, each of which fans out to
    /// its own leaves.
    Hierarchical,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Sequential, Strategy::BoundedParallel, Strategy::Hierarchical];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Sequential => "sequential",
            Strategy::BoundedParallel => "bounded_parallel",
            Strategy::Hierarchical => "hierarchical",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

/// Which leaves a plan step addresses.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    #[default]
    All,
    /// Leaves whose `role` attribute equals the value.
    Role(String),
}

impl Selector {
    pub fn matches(&self, role: Option<&str>) -> bool {
        match self {
            Selector::All => true,
            Selector::Role(want) => role == Some(want.as_str()),
        }
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selector::All => f.write_str("all"),
            Selector::Role(r) => write!(f, "role={r}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub selector: Selector,
    pub command: FsmCommand,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandPlan {
    pub high_level_verb: String,
    pub steps: Vec<PlanStep>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    #[serde(default)]
    pub selector: Selector,
    pub verb: Verb,
    #[serde(default)]
    pub parameters: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionEntry {
    pub subsystem: String,
    pub verb: String,
    pub phases: Vec<Phase>,
}

/// Maps (subsystem, high-level verb) to ordered phases. Verbs without an
/// entry that name an FSM verb expand to one broadcast step.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionTable {
    #[serde(default)]
    pub entries: Vec<ExpansionEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ControlError {
    #[error("unknown verb {0:?}")]
    UnknownVerb(String),
    #[error("step {selector} of {verb:?} selects no children")]
    EmptySelector { verb: String, selector: Selector },
    #[error("malformed expansion table: {0}")]
    MalformedTable(String),
    #[error("function manager has no children")]
    NoChildren,
    #[error("hierarchical function manager {0} has leaf children")]
    LeafUnderHierarchical(String),
    #[error("worker limit must be at least 1")]
    ZeroWorkers,
    #[error("cannot start function manager: {0}")]
    FmSpawnFailure(String),
}

impl ControlError {
    pub fn code(&self) -> &'static str {
        match self {
            ControlError::UnknownVerb(_) => "UnknownVerb",
            ControlError::EmptySelector { .. } => "EmptySelector",
            ControlError::MalformedTable(_) => "MalformedTable",
            ControlError::NoChildren => "NoChildren",
            ControlError::LeafUnderHierarchical(_) => "LeafUnderHierarchical",
            ControlError::ZeroWorkers => "ZeroWorkers",
            ControlError::FmSpawnFailure(_) => "FmSpawnFailure",
        }
    }
}

impl ExpansionTable {
    pub fn from_json(text: &str) -> Result<Self, ControlError> {
        let table: ExpansionTable =
            serde_json::from_str(text).map_err(|e| ControlError::MalformedTable(e.to_string()))?;
        for e in &table.entries {
            if e.phases.is_empty() {
                return Err(ControlError::MalformedTable(format!(
                    "{}/{} has no phases",
                    e.subsystem, e.verb
                )));
            }
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, ControlError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ControlError::MalformedTable(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn entry(&self, subsystem: &str, verb: &str) -> Option<&ExpansionEntry> {
        self.entries
            .iter()
            .find(|e| e.subsystem == subsystem && e.verb == verb)
            .or_else(|| {
                self.entries
                    .iter()
                    .find(|e| e.subsystem == DEFAULT_SUBSYSTEM && e.verb == verb)
            })
    }

    /// Expands `verb` for `partition`, whose effective resources are `leaves`.
    pub fn expand(
        &self,
        verb: &str,
        partition: &Partition,
        leaves: &[Resource],
    ) -> Result<CommandPlan, ControlError> {
        let subsystem = partition.subsystem.as_deref().unwrap_or(DEFAULT_SUBSYSTEM);
        let steps: Vec<PlanStep> = match self.entry(subsystem, verb) {
            Some(entry) => entry
                .phases
                .iter()
                .map(|p| PlanStep {
                    selector: p.selector.clone(),
                    command: FsmCommand {
                        verb: p.verb,
                        parameters: p.parameters.clone(),
                    },
                })
                .collect(),
            None => {
                let v: Verb = verb
                    .parse()
                    .map_err(|_| ControlError::UnknownVerb(verb.to_string()))?;
                vec![PlanStep {
                    selector: Selector::All,
                    command: FsmCommand::new(v),
                }]
            }
        };
        for step in &steps {
            if !leaves.iter().any(|r| step.selector.matches(r.role())) {
                return Err(ControlError::EmptySelector {
                    verb: verb.to_string(),
                    selector: step.selector.clone(),
                });
            }
        }
        Ok(CommandPlan {
            high_level_verb: verb.to_string(),
            steps,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCode {
    Timeout,
    Transport,
    IllegalTransition,
    NodeFault,
    Protocol,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Ok { state: FsmState },
    Err { code: FailureCode, message: String },
}

impl Outcome {
    pub fn is_ok(&self) -> bool {
        matches!(self, Outcome::Ok { .. })
    }

    pub fn state(&self) -> Option<FsmState> {
        match self {
            Outcome::Ok { state } => Some(*state),
            Outcome::Err { .. } => None,
        }
    }

    /// Outcome without its free-text message, for cross-strategy comparison.
    pub fn key(&self) -> OutcomeKey {
        match self {
            Outcome::Ok { state } => OutcomeKey::State(*state),
            Outcome::Err { code, .. } => OutcomeKey::Failure(*code),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OutcomeKey {
    State(FsmState),
    Failure(FailureCode),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChildOutcome {
    pub child: String,
    pub outcome: Outcome,
}

/// Per-leaf outcomes of one fan-out, in child order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FanoutResult {
    pub outcomes: Vec<ChildOutcome>,
    pub elapsed: Duration,
}

impl FanoutResult {
    pub fn failed(&self) -> Vec<String> {
        self.outcomes
            .iter()
            .filter(|o| !o.outcome.is_ok())
            .map(|o| o.child.clone())
            .collect()
    }

    pub fn is_partial_failure(&self) -> bool {
        self.outcomes.iter().any(|o| !o.outcome.is_ok())
    }

    /// Sorted (child, outcome) pairs with messages stripped.
    pub fn outcome_multiset(&self) -> Vec<(String, OutcomeKey)> {
        let mut v: Vec<_> = self
            .outcomes
            .iter()
            .map(|o| (o.child.clone(), o.outcome.key()))
            .collect();
        v.sort();
        v
    }

    pub fn states(&self) -> impl Iterator<Item = FsmState> + '_ {
        self.outcomes.iter().filter_map(|o| o.outcome.state())
    }
}

/// What a session control verb did.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session_id: String,
    pub verb: String,
    pub state: FsmState,
    pub steps_run: usize,
    pub outcomes: Vec<ChildOutcome>,
    #[serde(default)]
    pub failed: Vec<String>,
    pub elapsed_us: u64,
}

impl SessionReport {
    pub fn is_partial_failure(&self) -> bool {
        !self.failed.is_empty()
    }
}

/// Aggregate over a child-state map, `Initial` when nothing is known yet.
pub fn aggregate_known<'a, I>(states: I) -> FsmState
where
    I: IntoIterator<Item = &'a FsmState>,
{
    fsm::aggregate(states.into_iter().copied()).unwrap_or(FsmState::Initial)
}

/// Default intermediate layer width: ceil(sqrt(n)).
pub fn default_branching(n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let mut k = (n as f64).sqrt() as usize;
    while k * k < n {
        k += 1;
    }
    k
}

/// Splits `0..n` into `groups` contiguous slices whose sizes differ by at
/// most one. Empty slices are omitted.
pub fn balanced_slices(n: usize, groups: usize) -> Vec<Range<usize>> {
    let groups = groups.clamp(1, n.max(1));
    let base = n / groups;
    let extra = n % groups;
    let mut out = Vec::with_capacity(groups);
    let mut start = 0;
    for g in 0..groups {
        let len = base + usize::from(g < extra);
        if len > 0 {
            out.push(start..start + len);
        }
        start += len;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ResourceKind;
    use proptest::prelude::*;

    fn leaf(id: &str, role: &str) -> Resource {
        Resource::new(id, ResourceKind::Software, format!("http://{id}")).with_attribute("role", role)
    }

    #[test]
    fn default_broadcast() {
        let p = Partition::new("flat", ["a", "b", "c"]);
        let leaves = [leaf("a", "x"), leaf("b", "x"), leaf("c", "y")];
        let plan = ExpansionTable::default().expand("start", &p, &leaves).unwrap();
        assert_eq!(plan.steps.len(), 1);
        assert_eq!(plan.steps[0].selector, Selector::All);
        assert_eq!(plan.steps[0].command.verb, Verb::Start);
    }

    #[test]
    fn unknown_verb() {
        let p = Partition::new("flat", ["a"]);
        assert_eq!(
            ExpansionTable::default().expand("fly", &p, &[leaf("a", "x")]),
            Err(ControlError::UnknownVerb("fly".into()))
        );
    }

    #[test]
    fn two_phase_override_from_file_format() {
        let table = ExpansionTable::from_json(
            r#"{"entries":[{"subsystem":"daq","verb":"configure","phases":[
                {"selector":{"role":"readout"},"verb":"configure"},
                {"selector":{"role":"builder"},"verb":"configure","parameters":{"mode":"fast"}}
            ]}]}"#,
        )
        .unwrap();
        let p = Partition::new("daq1", ["r", "b"]).with_subsystem("daq");
        let leaves = [leaf("r", "readout"), leaf("b", "builder")];
        let plan = table.expand("configure", &p, &leaves).unwrap();
        let got: Vec<_> = plan
            .steps
            .iter()
            .map(|s| (s.selector.to_string(), s.command.verb))
            .collect();
        assert_eq!(
            got,
            [
                ("role=readout".to_string(), Verb::Configure),
                ("role=builder".to_string(), Verb::Configure)
            ]
        );
        assert_eq!(plan.steps[1].command.parameters["mode"], "fast");
        // Other subsystems still get the default broadcast, other verbs too.
        let other = Partition::new("o", ["r"]);
        assert_eq!(table.expand("configure", &other, &leaves).unwrap().steps.len(), 1);
        assert_eq!(table.expand("start", &p, &leaves).unwrap().steps.len(), 1);
    }

    #[test]
    fn high_level_verbs_and_empty_selectors() {
        let table = ExpansionTable::from_json(
            r#"{"entries":[{"subsystem":"default","verb":"boot","phases":[
                {"verb":"initialize"},{"verb":"configure"}]},
              {"subsystem":"default","verb":"odd","phases":[{"selector":{"role":"ghost"},"verb":"start"}]}]}"#,
        )
        .unwrap();
        let p = Partition::new("p", ["a"]);
        let leaves = [leaf("a", "readout")];
        assert_eq!(table.expand("boot", &p, &leaves).unwrap().steps.len(), 2);
        assert!(matches!(
            table.expand("odd", &p, &leaves),
            Err(ControlError::EmptySelector { .. })
        ));
        assert!(matches!(
            ExpansionTable::from_json(r#"{"entries":[{"subsystem":"a","verb":"b","phases":[]}]}"#),
            Err(ControlError::MalformedTable(_))
        ));
    }

    #[test]
    fn branching() {
        assert_eq!(default_branching(120), 11);
        assert_eq!(default_branching(100), 10);
        assert_eq!(default_branching(1), 1);
    }

    proptest! {
        #[test]
        fn slices_cover_and_balance(n in 0usize..500, groups in 1usize..40) {
            let s = balanced_slices(n, groups);
            let total: usize = s.iter().map(|r| r.len()).sum();
            prop_assert_eq!(total, n);
            let mut next = 0;
            for r in &s {
                prop_assert_eq!(r.start, next);
                next = r.end;
            }
            if let (Some(min), Some(max)) = (s.iter().map(|r| r.len()).min(), s.iter().map(|r| r.len()).max()) {
                prop_assert!(max - min <= 1);
            }
        }
    }
}
