//! Job control records.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum RestartPolicy {
    #[default]
    Never,
    /// Restart a failed attempt up to `max_restarts` times.
    OnFailure { max_restarts: u32 },
}

impl RestartPolicy {
    pub fn max_restarts(&self) -> u32 {
        match self {
            RestartPolicy::Never => 0,
            RestartPolicy::OnFailure { max_restarts } => *max_restarts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    pub id: String,
    /// Program followed by its arguments.
    pub command: Vec<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub working_dir: Option<PathBuf>,
    #[serde(default)]
    pub restart: RestartPolicy,
    pub log_source: String,
}

impl JobSpec {
    pub fn new<I, S>(id: impl Into<String>, command: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let id = id.into();
        Self {
            log_source: format!("job/{id}"),
            id,
            command: command.into_iter().map(Into::into).collect(),
            env: BTreeMap::new(),
            working_dir: None,
            restart: RestartPolicy::Never,
        }
    }

    pub fn restart(mut self, policy: RestartPolicy) -> Self {
        self.restart = policy;
        self
    }

    pub fn validate(&self) -> Result<(), JobError> {
        if self.id.is_empty() {
            return Err(JobError::InvalidSpec("empty job id".into()));
        }
        if self.command.first().is_none_or(|p| p.is_empty()) {
            return Err(JobError::InvalidSpec(format!("job {} has no command", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum JobState {
    Starting,
    Running,
    /// Exited on its own with status 0, or with any status after a stop.
    Exited { code: i32 },
    /// Terminated by a signal after a stop request.
    Killed,
    /// Exited non-zero or died from a signal nobody asked for.
    Failed {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        code: Option<i32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        signal: Option<i32>,
    },
}

impl JobState {
    pub fn is_live(&self) -> bool {
        matches!(self, JobState::Starting | JobState::Running)
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JobState::Starting => f.write_str("starting"),
            JobState::Running => f.write_str("running"),
            JobState::Exited { code } => write!(f, "exited({code})"),
            JobState::Killed => f.write_str("killed"),
            JobState::Failed { code: Some(c), .. } => write!(f, "failed({c})"),
            JobState::Failed { signal: Some(s), .. } => write!(f, "failed(signal {s})"),
            JobState::Failed { .. } => f.write_str("failed"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: String,
    #[serde(flatten)]
    pub state: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pid: Option<u32>,
    pub attempts: u32,
    pub restarts_used: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<Timestamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ended_at: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum JobError {
    #[error("cannot spawn {id}: {reason}")]
    SpawnFailure { id: String, reason: String },
    #[error("job {0} is already running")]
    DuplicateJobId(String),
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("invalid job spec: {0}")]
    InvalidSpec(String),
}

impl JobError {
    pub fn code(&self) -> &'static str {
        match self {
            JobError::SpawnFailure { .. } => "SpawnFailure",
            JobError::DuplicateJobId(_) => "DuplicateJobId",
            JobError::UnknownJob(_) => "UnknownJob",
            JobError::InvalidSpec(_) => "InvalidSpec",
        }
    }
}
