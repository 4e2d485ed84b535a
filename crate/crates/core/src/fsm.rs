//! The controlled-node state machine and state aggregation.
//!
//! Every leaf node follows the same table. Function managers never hold a
//! state of their own; they report the aggregate of their children, which
//! may be the `Mixed` sentinel while a transition is only partly applied.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FsmState {
    Initial,
    Halted,
    Configured,
    Running,
    Paused,
    Failed,
    Mixed,
}

impl FsmState {
    /// States a leaf may hold.
    pub const LEAF: [FsmState; 6] = [
        FsmState::Initial,
        FsmState::Halted,
        FsmState::Configured,
        FsmState::Running,
        FsmState::Paused,
        FsmState::Failed,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FsmState::Initial => "Initial",
            FsmState::Halted => "Halted",
            FsmState::Configured => "Configured",
            FsmState::Running => "Running",
            FsmState::Paused => "Paused",
            FsmState::Failed => "Failed",
            FsmState::Mixed => "Mixed",
        }
    }
}

impl fmt::Display for FsmState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    Initialize,
    Configure,
    Start,
    Pause,
    Resume,
    Stop,
    Halt,
    Reset,
}

impl Verb {
    pub const ALL: [Verb; 8] = [
        Verb::Initialize,
        Verb::Configure,
        Verb::Start,
        Verb::Pause,
        Verb::Resume,
        Verb::Stop,
        Verb::Halt,
        Verb::Reset,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Verb::Initialize => "initialize",
            Verb::Configure => "configure",
            Verb::Start => "start",
            Verb::Pause => "pause",
            Verb::Resume => "resume",
            Verb::Stop => "stop",
            Verb::Halt => "halt",
            Verb::Reset => "reset",
        }
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown verb {0:?}")]
pub struct UnknownVerb(pub String);

impl FromStr for Verb {
    type Err = UnknownVerb;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Verb::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| UnknownVerb(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsmCommand {
    pub verb: Verb,
    #[serde(default)]
    pub parameters: BTreeMap<String, String>,
}

impl FsmCommand {
    pub fn new(verb: Verb) -> Self {
        Self {
            verb,
            parameters: BTreeMap::new(),
        }
    }
}

impl From<Verb> for FsmCommand {
    fn from(verb: Verb) -> Self {
        Self::new(verb)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FsmError {
    #[error("illegal transition: {verb} from {state}")]
    IllegalTransition { state: FsmState, verb: Verb },
    #[error("cannot aggregate an empty child set")]
    EmptyChildSet,
}

/// Target state for `verb` applied in `state`, if the table has that row.
pub fn target(state: FsmState, verb: Verb) -> Option<FsmState> {
    use FsmState::*;
    match (verb, state) {
        (_, Mixed) => None,
        (Verb::Reset, _) => Some(Initial),
        (Verb::Initialize, Initial) => Some(Halted),
        (Verb::Configure, Halted) => Some(Configured),
        (Verb::Start, Configured) => Some(Running),
        (Verb::Pause, Running) => Some(Paused),
        (Verb::Resume, Paused) => Some(Running),
        (Verb::Stop, Running | Paused) => Some(Configured),
        (Verb::Halt, Configured | Running | Paused) => Some(Halted),
        _ => None,
    }
}

pub fn transition(state: FsmState, cmd: &FsmCommand) -> Result<FsmState, FsmError> {
    target(state, cmd.verb).ok_or(FsmError::IllegalTransition {
        state,
        verb: cmd.verb,
    })
}

/// Verbs accepted from `state`, in table order.
pub fn legal_verbs(state: FsmState) -> Vec<Verb> {
    Verb::ALL
        .into_iter()
        .filter(|v| target(state, *v).is_some())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRow {
    pub from: FsmState,
    pub verb: Verb,
    pub to: FsmState,
}

/// Every row of the transition table.
pub fn transition_table() -> Vec<TransitionRow> {
    FsmState::LEAF
        .into_iter()
        .flat_map(|from| {
            Verb::ALL
                .into_iter()
                .filter_map(move |verb| target(from, verb).map(|to| TransitionRow { from, verb, to }))
        })
        .collect()
}

/// Failed dominates; unanimity yields the common state; anything else is Mixed.
pub fn aggregate<I>(children: I) -> Result<FsmState, FsmError>
where
    I: IntoIterator<Item = FsmState>,
{
    let mut iter = children.into_iter();
    let first = iter.next().ok_or(FsmError::EmptyChildSet)?;
    let mut result = first;
    for s in iter {
        if s == FsmState::Failed || result == FsmState::Failed {
            result = FsmState::Failed;
        } else if s != result {
            result = FsmState::Mixed;
        }
    }
    Ok(result)
}
