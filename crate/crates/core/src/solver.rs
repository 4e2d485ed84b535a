//! Threshold-in-window correlation rules and the evaluation engine.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ims::{CompiledCriteria, Criteria, StoredMessage};
use crate::model::{Severity, Subscription};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RuleAction {
    /// Suggest a control verb for a partition to the session manager.
    Propose { verb: String, partition_id: String },
    /// Publish a warning to the monitor service.
    Notify { text: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub id: String,
    #[serde(default)]
    pub pattern: Criteria,
    pub threshold: usize,
    pub window_ms: u64,
    pub action: RuleAction,
    #[serde(default)]
    pub cooldown_ms: u64,
}

impl Rule {
    pub fn window(&self) -> Duration {
        Duration::from_millis(self.window_ms)
    }

    pub fn cooldown(&self) -> Duration {
        Duration::from_millis(self.cooldown_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub rule_id: String,
    pub fired_at: Timestamp,
    pub evidence: Vec<u64>,
    pub action: RuleAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SolverError {
    #[error("malformed rule {id:?}: {reason}")]
    MalformedRule { id: String, reason: String },
    #[error("cannot read ruleset: {0}")]
    Io(String),
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct RuleSet {
    #[serde(default)]
    rules: Vec<Rule>,
}

pub fn parse_rules(text: &str) -> Result<Vec<Rule>, SolverError> {
    let set: RuleSet = serde_json::from_str(text).map_err(|e| SolverError::MalformedRule {
        id: String::new(),
        reason: e.to_string(),
    })?;
    let mut seen = HashSet::new();
    for r in &set.rules {
        let bad = |reason: &str| SolverError::MalformedRule {
            id: r.id.clone(),
            reason: reason.to_string(),
        };
        if r.id.is_empty() {
            return Err(bad("empty id"));
        }
        if !seen.insert(r.id.as_str()) {
            return Err(bad("duplicate id"));
        }
        if r.threshold == 0 {
            return Err(bad("threshold must be at least 1"));
        }
        if r.window_ms == 0 {
            return Err(bad("window must be positive"));
        }
        if r.pattern.since.is_some() || r.pattern.until.is_some() {
            return Err(bad("patterns cannot carry a time range"));
        }
        r.pattern.compile().map_err(|e| bad(&e.to_string()))?;
    }
    Ok(set.rules)
}

pub fn load_rules(path: &Path) -> Result<Vec<Rule>, SolverError> {
    let text = std::fs::read_to_string(path).map_err(|e| SolverError::Io(format!("{}: {e}", path.display())))?;
    parse_rules(&text)
}

/// One monitor subscription wide enough for every rule, or `None` for an
/// empty ruleset. Rule patterns are re-checked per message.
pub fn merged_subscription(rules: &[Rule], callback_url: &str) -> Option<Subscription> {
    let first = rules.first()?;
    let min_severity = rules
        .iter()
        .map(|r| r.pattern.min_severity.unwrap_or(Severity::Debug))
        .min()
        .unwrap_or(Severity::Debug);
    let msg_types = rules
        .iter()
        .map(|r| r.pattern.msg_types.clone())
        .try_fold(BTreeSet::new(), |mut acc, t| {
            acc.extend(t?);
            Some(acc)
        });
    let source_pattern = match &first.pattern.source_pattern {
        Some(p) if rules.iter().all(|r| r.pattern.source_pattern.as_ref() == Some(p)) => p.clone(),
        _ => "*".to_string(),
    };
    Some(Subscription {
        id: String::new(),
        source_pattern,
        min_severity,
        msg_types,
        since: None,
        callback_url: callback_url.to_string(),
    })
}

struct RuleState {
    rule: Rule,
    criteria: CompiledCriteria,
    buffer: VecDeque<(Timestamp, u64)>,
    last_fired: Option<Timestamp>,
}

/// Evaluates rules over an ordered message stream.
///
/// Time is the largest message timestamp seen so far, so replaying a stream
/// gives the same proposals regardless of wall-clock speed. A buffer is
/// cleared when its rule fires.
pub struct Engine {
    rules: Vec<RuleState>,
    clock: Option<Timestamp>,
    own_source: Option<String>,
}

impl Engine {
    pub fn new(rules: Vec<Rule>) -> Result<Self, SolverError> {
        let rules = rules
            .into_iter()
            .map(|rule| {
                let criteria = rule.pattern.compile().map_err(|e| SolverError::MalformedRule {
                    id: rule.id.clone(),
                    reason: e.to_string(),
                })?;
                Ok(RuleState {
                    rule,
                    criteria,
                    buffer: VecDeque::new(),
                    last_fired: None,
                })
            })
            .collect::<Result<_, SolverError>>()?;
        Ok(Self {
            rules,
            clock: None,
            own_source: None,
        })
    }

    /// Messages from `source` are ignored, so notifications never feed back.
    pub fn ignore_source(mut self, source: impl Into<String>) -> Self {
        self.own_source = Some(source.into());
        self
    }

    pub fn rules(&self) -> impl Iterator<Item = &Rule> {
        self.rules.iter().map(|s| &s.rule)
    }

    pub fn is_idle(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn ingest(&mut self, m: &StoredMessage) -> Vec<Proposal> {
        if self.own_source.as_deref() == Some(m.msg.source.as_str()) {
            return Vec::new();
        }
        let ts = m.msg.timestamp;
        let clock = self.clock.map_or(ts, |c| c.max(ts));
        self.clock = Some(clock);
        let mut out = Vec::new();
        for st in &mut self.rules {
            if !st.criteria.matches(&m.msg) {
                continue;
            }
            st.buffer.push_back((ts, m.seq));
            let horizon = clock.saturating_sub(st.rule.window());
            st.buffer.retain(|(t, _)| *t >= horizon);
            let cooled = st
                .last_fired
                .is_none_or(|last| clock.since(last) >= st.rule.cooldown());
            if st.buffer.len() >= st.rule.threshold && cooled {
                out.push(Proposal {
                    rule_id: st.rule.id.clone(),
                    fired_at: clock,
                    evidence: st.buffer.drain(..).map(|(_, seq)| seq).collect(),
                    action: st.rule.action.clone(),
                });
                st.last_fired = Some(clock);
            }
        }
        out
    }
}
