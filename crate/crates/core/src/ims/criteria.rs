use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LogMessage, Severity, Subscription};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CriteriaError {
    #[error("bad source pattern {pattern:?}: {reason}")]
    BadPattern { pattern: String, reason: String },
    #[error("empty time range: since {since} is after until {until}")]
    EmptyRange { since: Timestamp, until: Timestamp },
    #[error("limit must be positive")]
    ZeroLimit,
    #[error("bad criteria: {0}")]
    Invalid(String),
}

/// Selection criteria over monitor messages. Absent fields match anything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Criteria {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_severity: Option<Severity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msg_types: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub since: Option<Timestamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub until: Option<Timestamp>,
}

impl Criteria {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn min_severity(mut self, s: Severity) -> Self {
        self.min_severity = Some(s);
        self
    }

    pub fn source(mut self, pattern: impl Into<String>) -> Self {
        self.source_pattern = Some(pattern.into());
        self
    }

    pub fn msg_types<I, S>(mut self, types: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.msg_types = Some(types.into_iter().map(Into::into).collect());
        self
    }

    pub fn compile(&self) -> Result<CompiledCriteria, CriteriaError> {
        let pattern = match self.source_pattern.as_deref() {
            None | Some("*") => None,
            Some(p) => Some(glob::Pattern::new(p).map_err(|e| CriteriaError::BadPattern {
                pattern: p.to_string(),
                reason: e.msg.to_string(),
            })?),
        };
        if let (Some(since), Some(until)) = (self.since, self.until) {
            if since > until {
                return Err(CriteriaError::EmptyRange { since, until });
            }
        }
        Ok(CompiledCriteria {
            pattern,
            min_severity: self.min_severity,
            msg_types: self.msg_types.clone(),
            since: self.since,
            until: self.until,
        })
    }
}

impl From<&Subscription> for Criteria {
    fn from(s: &Subscription) -> Self {
        Criteria {
            source_pattern: Some(s.source_pattern.clone()),
            min_severity: Some(s.min_severity),
            msg_types: s.msg_types.clone(),
            since: s.since,
            until: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompiledCriteria {
    pattern: Option<glob::Pattern>,
    min_severity: Option<Severity>,
    msg_types: Option<BTreeSet<String>>,
    since: Option<Timestamp>,
    until: Option<Timestamp>,
}

impl CompiledCriteria {
    pub fn matches(&self, m: &LogMessage) -> bool {
        self.min_severity.is_none_or(|s| m.severity >= s)
            && self.since.is_none_or(|t| m.timestamp >= t)
            && self.until.is_none_or(|t| m.timestamp <= t)
            && self.msg_types.as_ref().is_none_or(|ts| ts.contains(&m.msg_type))
            && self.pattern.as_ref().is_none_or(|p| p.matches(&m.source))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(source: &str, sev: Severity) -> LogMessage {
        LogMessage::new(source, "t", sev, "").at(Timestamp::from_micros(100))
    }

    #[test]
    fn severity_threshold() {
        let c = Criteria::all().min_severity(Severity::Error).compile().unwrap();
        assert!(!c.matches(&msg("a", Severity::Info)));
        assert!(c.matches(&msg("a", Severity::Error)));
        assert!(c.matches(&msg("a", Severity::Fatal)));
    }

    #[test]
    fn glob_sources() {
        let c = Criteria::all().source("fm/*").compile().unwrap();
        assert!(c.matches(&msg("fm/top", Severity::Info)));
        assert!(!c.matches(&msg("node/1", Severity::Info)));
        let q = Criteria::all().source("node?").compile().unwrap();
        assert!(q.matches(&msg("node7", Severity::Info)));
        assert!(!q.matches(&msg("node17", Severity::Info)));
    }

    #[test]
    fn malformed() {
        assert!(matches!(
            Criteria::all().source("[abc").compile(),
            Err(CriteriaError::BadPattern { .. })
        ));
        let c = Criteria {
            since: Some(Timestamp::from_micros(10)),
            until: Some(Timestamp::from_micros(5)),
            ..Default::default()
        };
        assert!(matches!(c.compile(), Err(CriteriaError::EmptyRange { .. })));
    }

    #[test]
    fn time_range_is_inclusive() {
        let c = Criteria {
            since: Some(Timestamp::from_micros(100)),
            until: Some(Timestamp::from_micros(100)),
            ..Default::default()
        }
        .compile()
        .unwrap();
        assert!(c.matches(&msg("a", Severity::Debug)));
    }
}
