//! The canonical message envelope and its JSON encoding.

mod body;

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use uuid::Uuid;

use crate::time::Timestamp;

pub use body::*;

pub const ENVELOPE_PATH: &str = "/rcms/v1/envelope";
pub const REGISTRY_PATH: &str = "/rcms/v1/registry";
pub const STREAM_PATH: &str = "/rcms/v1/stream";
pub const REGISTRY_ENV: &str = "RCMS_REGISTRY_URL";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Command,
    Ack,
    Publish,
    Subscribe,
    Unsubscribe,
    Query,
    Result,
    Event,
    Register,
    Lookup,
    Error,
}

impl Kind {
    pub const ALL: [Kind; 11] = [
        Kind::Command,
        Kind::Ack,
        Kind::Publish,
        Kind::Subscribe,
        Kind::Unsubscribe,
        Kind::Query,
        Kind::Result,
        Kind::Event,
        Kind::Register,
        Kind::Lookup,
        Kind::Error,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Kind::Command => "command",
            Kind::Ack => "ack",
            Kind::Publish => "publish",
            Kind::Subscribe => "subscribe",
            Kind::Unsubscribe => "unsubscribe",
            Kind::Query => "query",
            Kind::Result => "result",
            Kind::Event => "event",
            Kind::Register => "register",
            Kind::Lookup => "lookup",
            Kind::Error => "error",
        }
    }

    /// Replies must point back at their request.
    pub fn needs_correlation(&self) -> bool {
        matches!(self, Kind::Ack | Kind::Result | Kind::Error)
    }

    /// Kinds sent with `request`, expecting a reply envelope.
    pub fn is_request(&self) -> bool {
        matches!(
            self,
            Kind::Command | Kind::Query | Kind::Subscribe | Kind::Unsubscribe | Kind::Register | Kind::Lookup
        )
    }

    /// Kinds sent with `push`, one-way.
    pub fn is_push(&self) -> bool {
        matches!(self, Kind::Publish | Kind::Event)
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Kind {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Kind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| WireError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("malformed envelope: {0}")]
    MalformedEnvelope(String),
    #[error("unknown envelope kind {0:?}")]
    UnknownKind(String),
    #[error("{kind} envelope cannot carry a {body} body")]
    BodyMismatch { kind: Kind, body: &'static str },
    #[error("cannot encode {kind} envelope with a {body} body")]
    UnencodableBody { kind: Kind, body: &'static str },
    #[error("{0} envelope has no correlation id")]
    MissingCorrelation(Kind),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("transport: {0}")]
    Transport(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("{}: {}", .0.code, .0.message)]
    Remote(ErrorBody),
}

impl WireError {
    pub fn code(&self) -> &str {
        match self {
            WireError::MalformedEnvelope(_) => "MalformedEnvelope",
            WireError::UnknownKind(_) => "UnknownKind",
            WireError::BodyMismatch { .. } => "BodyMismatch",
            WireError::UnencodableBody { .. } => "UnencodableBody",
            WireError::MissingCorrelation(_) => "MissingCorrelation",
            WireError::Timeout(_) => "Timeout",
            WireError::Transport(_) => "TransportError",
            WireError::Protocol(_) => "ProtocolError",
            WireError::Remote(b) => &b.code,
        }
    }

    pub fn remote(&self) -> Option<&ErrorBody> {
        match self {
            WireError::Remote(b) => Some(b),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Envelope {
    pub id: Uuid,
    pub kind: Kind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correlation_id: Option<Uuid>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    pub source: String,
    pub target: String,
    pub issued_at: Timestamp,
    pub body: Body,
}

/// Decoding shape: kind and body are checked by hand so each failure maps
/// to its own error.
#[derive(Deserialize)]
struct RawEnvelope {
    id: Uuid,
    kind: String,
    #[serde(default)]
    correlation_id: Option<Uuid>,
    #[serde(default)]
    session_id: Option<String>,
    source: String,
    target: String,
    issued_at: Timestamp,
    body: Value,
}

impl Envelope {
    pub fn new(kind: Kind, source: impl Into<String>, target: impl Into<String>, body: impl Into<Body>) -> Self {
        Self {
            id: Uuid::new_v4(),
            kind,
            correlation_id: None,
            session_id: None,
            source: source.into(),
            target: target.into(),
            issued_at: Timestamp::now(),
            body: body.into(),
        }
    }

    pub fn with_session(mut self, session_id: impl Into<String>) -> Self {
        self.session_id = Some(session_id.into());
        self
    }

    /// A reply addressed to this envelope's sender.
    pub fn reply(&self, kind: Kind, source: impl Into<String>, body: impl Into<Body>) -> Envelope {
        Envelope {
            id: Uuid::new_v4(),
            kind,
            correlation_id: Some(self.id),
            session_id: self.session_id.clone(),
            source: source.into(),
            target: self.source.clone(),
            issued_at: Timestamp::now(),
            body: body.into(),
        }
    }

    pub fn error_reply(&self, source: impl Into<String>, err: ErrorBody) -> Envelope {
        self.reply(Kind::Error, source, Body::Error(err))
    }

    pub fn validate(&self) -> Result<(), WireError> {
        if !self.body.admitted_by(self.kind) {
            return Err(WireError::BodyMismatch {
                kind: self.kind,
                body: self.body.tag(),
            });
        }
        if self.kind.needs_correlation() && self.correlation_id.is_none() {
            return Err(WireError::MissingCorrelation(self.kind));
        }
        Ok(())
    }

    /// Canonical JSON: fixed field order, absent optionals omitted,
    /// microsecond UTC timestamps.
    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        self.validate().map_err(|e| match e {
            WireError::BodyMismatch { kind, body } => WireError::UnencodableBody { kind, body },
            other => other,
        })?;
        serde_json::to_vec(self).map_err(|_| WireError::UnencodableBody {
            kind: self.kind,
            body: self.body.tag(),
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Envelope, WireError> {
        let raw: RawEnvelope =
            serde_json::from_slice(bytes).map_err(|e| WireError::MalformedEnvelope(e.to_string()))?;
        let kind: Kind = raw.kind.parse()?;
        let body: Body = serde_json::from_value(raw.body)
            .map_err(|e| WireError::MalformedEnvelope(format!("body: {e}")))?;
        let env = Envelope {
            id: raw.id,
            kind,
            correlation_id: raw.correlation_id,
            session_id: raw.session_id,
            source: raw.source,
            target: raw.target,
            issued_at: raw.issued_at,
            body,
        };
        env.validate()?;
        Ok(env)
    }

    /// The body of a non-error reply, or the remote error.
    pub fn into_body(self) -> Result<Body, WireError> {
        match self.body {
            Body::Error(e) => Err(WireError::Remote(e)),
            body => Ok(body),
        }
    }
}

/// Builds a `Protocol` error for a reply whose body is not the one expected.
pub fn unexpected(expected: &str, got: &Body) -> WireError {
    WireError::Protocol(format!("expected {expected}, got {}", got.tag()))
}

// Conversions so call sites can pass payload structs directly.
macro_rules! into_body {
    ($($t:ty => $v:ident),* $(,)?) => {
        $(impl From<$t> for Body {
            fn from(v: $t) -> Body {
                Body::$v(v)
            }
        })*
    };
}

into_body! {
    crate::fsm::FsmCommand => FsmCommand,
    Fanout => Fanout,
    OpenSession => OpenSession,
    ControlSession => ControlSession,
    AllocateRequest => Allocate,
    crate::job::JobSpec => StartJob,
    StopJob => StopJob,
    Deregister => Deregister,
    NodeAck => NodeAck,
    FanoutAck => FanoutAck,
    Ack => Ack,
    Registered => Registered,
    Published => Published,
    crate::model::LogMessage => LogMessage,
    crate::model::Subscription => Subscription,
    ResourceQuery => ResourceQuery,
    PartitionRef => DescribePartition,
    crate::ims::MessageQuery => MessageQuery,
    JobRef => JobStatusQuery,
    ProbeOk => ProbeOk,
    Resources => Resources,
    PartitionTree => PartitionTree,
    crate::resource::Allocation => Allocation,
    crate::resource::ScanReport => ScanReport,
    Messages => Messages,
    Subscribed => Subscribed,
    DeliveryStats => DeliveryStats,
    crate::model::Session => Session,
    crate::control::SessionReport => SessionReport,
    Sessions => Sessions,
    SessionView => SessionView,
    FsmTable => FsmTable,
    crate::job::JobStatus => JobStatus,
    Jobs => Jobs,
    Proposals => Proposals,
    Services => Services,
    Version => Version,
    crate::registry::ServiceRecord => ServiceRecord,
    crate::model::Resource => Resource,
    crate::model::Partition => Partition,
    Lookup => Lookup,
    crate::ims::StoredMessage => StoredMessage,
    Suggestion => Suggestion,
    ErrorBody => Error,
}
