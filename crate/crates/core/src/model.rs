//! Shared domain records: resources, partitions, sessions and monitor messages.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::fsm::FsmState;
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    Hardware,
    Software,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Availability {
    Available,
    Unreachable,
    Allocated,
}

/// A registrable hardware or software unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resource {
    pub id: String,
    pub kind: ResourceKind,
    pub uri: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    #[serde(default)]
    pub exclusive: bool,
    #[serde(default = "default_availability")]
    pub availability: Availability,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_scanned: Option<Timestamp>,
}

fn default_availability() -> Availability {
    Availability::Available
}

impl Resource {
    pub fn new(id: impl Into<String>, kind: ResourceKind, uri: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            kind,
            uri: uri.into(),
            attributes: BTreeMap::new(),
            exclusive: false,
            availability: Availability::Available,
            last_scanned: None,
        }
    }

    pub fn exclusive(mut self, exclusive: bool) -> Self {
        self.exclusive = exclusive;
        self
    }

    pub fn with_attribute(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.attributes.insert(key.into(), value.into());
        self
    }

    /// The `role` attribute, used by command-plan selectors.
    pub fn role(&self) -> Option<&str> {
        self.attributes.get("role").map(String::as_str)
    }
}

/// A hierarchical, shareable group of resources.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub id: String,
    #[serde(default)]
    pub resource_ids: BTreeSet<String>,
    #[serde(default)]
    pub children: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    /// Subsystem type, keys the command expansion table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsystem: Option<String>,
}

impl Partition {
    pub fn new<I, S>(id: impl Into<String>, resources: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            id: id.into(),
            resource_ids: resources.into_iter().map(Into::into).collect(),
            children: Vec::new(),
            parent: None,
            subsystem: None,
        }
    }

    pub fn with_children<I, S>(mut self, children: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.children = children.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_subsystem(mut self, subsystem: impl Into<String>) -> Self {
        self.subsystem = Some(subsystem.into());
        self
    }
}

/// The running of one partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub partition_id: String,
    pub state: FsmState,
    #[serde(default)]
    pub users: Vec<String>,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Debug,
    Info,
    Warn,
    Error,
    Fatal,
}

impl Severity {
    pub const ALL: [Severity; 5] = [
        Severity::Debug,
        Severity::Info,
        Severity::Warn,
        Severity::Error,
        Severity::Fatal,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Severity::Debug => "debug",
            Severity::Info => "info",
            Severity::Warn => "warn",
            Severity::Error => "error",
            Severity::Fatal => "fatal",
        }
    }

    pub fn rank(&self) -> u8 {
        *self as u8
    }

    pub fn from_rank(rank: u8) -> Option<Self> {
        Self::ALL.get(rank as usize).copied()
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Severity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Severity::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown severity {s:?}"))
    }
}

/// A monitor record. `timestamp` is the publisher's clock; the receiving
/// service records its own receipt time separately.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogMessage {
    pub source: String,
    pub msg_type: String,
    pub severity: Severity,
    pub timestamp: Timestamp,
    #[serde(default)]
    pub payload: String,
}

impl LogMessage {
    pub fn new(
        source: impl Into<String>,
        msg_type: impl Into<String>,
        severity: Severity,
        payload: impl Into<String>,
    ) -> Self {
        Self {
            source: source.into(),
            msg_type: msg_type.into(),
            severity,
            timestamp: Timestamp::now(),
            payload: payload.into(),
        }
    }

    pub fn at(mut self, timestamp: Timestamp) -> Self {
        self.timestamp = timestamp;
        self
    }
}

/// A filter plus callback registration against the monitor service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscription {
    /// Assigned by the service when left empty.
    #[serde(default)]
    pub id: String,
    pub source_pattern: String,
    pub min_severity: Severity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msg_types: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub since: Option<Timestamp>,
    pub callback_url: String,
}

impl Subscription {
    pub fn new(callback_url: impl Into<String>) -> Self {
        Self {
            id: String::new(),
            source_pattern: "*".to_string(),
            min_severity: Severity::Debug,
            msg_types: None,
            since: None,
            callback_url: callback_url.into(),
        }
    }
}
