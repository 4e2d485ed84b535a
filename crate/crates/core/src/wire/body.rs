use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Kind;
use crate::control::{ChildOutcome, SessionReport, Selector};
use crate::fsm::{FsmCommand, FsmState, TransitionRow, Verb};
use crate::ims::{MessageQuery, StoredMessage};
use crate::job::{JobSpec, JobStatus};
use crate::model::{LogMessage, Partition, Resource, Session, Subscription};
use crate::registry::ServiceRecord;
use crate::resource::{Allocation, ResourceFilter, ScanReport};
use crate::solver::RuleAction;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Empty {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FanoutAction {
    Command(FsmCommand),
    QueryState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fanout {
    pub action: FanoutAction,
    #[serde(default)]
    pub selector: Selector,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FanoutAck {
    pub outcomes: Vec<ChildOutcome>,
    pub elapsed_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeAck {
    pub node_id: String,
    pub state: FsmState,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registered {
    pub id: String,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Published {
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenSession {
    pub partition_id: String,
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlSession {
    pub session_id: String,
    pub verb: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRef {
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocateRequest {
    pub partition_id: String,
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopJob {
    pub id: String,
    pub grace_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRef {
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deregister {
    pub name: String,
    pub instance_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubscriptionRef {
    pub subscription_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceQuery {
    #[serde(default)]
    pub filter: ResourceFilter,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionRef {
    pub partition_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lookup {
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeOk {
    pub service: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resources {
    pub resources: Vec<Resource>,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionTree {
    /// The requested partition first, then its descendants in pre-order.
    pub partitions: Vec<Partition>,
    pub resources: Vec<Resource>,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Messages {
    pub messages: Vec<StoredMessage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscribed {
    pub subscription_id: String,
    /// Stored messages queued as backfill.
    #[serde(default)]
    pub backfill: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryStats {
    pub subscription_id: String,
    pub delivered: u64,
    pub dropped: u64,
    pub queued: u64,
    pub retries: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sessions {
    pub sessions: Vec<Session>,
}

/// A session with its partition tree and the last known leaf states.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionView {
    pub session: Session,
    pub partitions: Vec<Partition>,
    pub leaf_states: BTreeMap<String, FsmState>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsmTable {
    pub states: Vec<FsmState>,
    pub verbs: Vec<Verb>,
    pub transitions: Vec<TransitionRow>,
}

impl FsmTable {
    pub fn current() -> Self {
        Self {
            states: FsmState::LEAF.to_vec(),
            verbs: Verb::ALL.to_vec(),
            transitions: crate::fsm::transition_table(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Jobs {
    pub jobs: Vec<JobStatus>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suggestion {
    pub rule_id: String,
    pub action: RuleAction,
    pub evidence: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposals {
    pub proposals: Vec<Suggestion>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Services {
    pub records: Vec<ServiceRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Version {
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holder: Option<String>,
}

impl ErrorBody {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
            ids: Vec::new(),
            holder: None,
        }
    }
}

macro_rules! bodies {
    ($($tag:literal => $variant:ident($inner:ty): [$($kind:ident),+]),* $(,)?) => {
        /// Envelope payload, tagged by `type`. Each variant is admitted by a
        /// fixed set of envelope kinds.
        #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
        #[serde(tag = "type")]
        pub enum Body {
            $(#[serde(rename = $tag)] $variant($inner),)*
        }

        impl Body {
            pub fn tag(&self) -> &'static str {
                match self {
                    $(Body::$variant(_) => $tag,)*
                }
            }

            pub fn admitted_by(&self, kind: Kind) -> bool {
                match self {
                    $(Body::$variant(_) => matches!(kind, $(Kind::$kind)|+),)*
                }
            }

            /// Every body tag with the kinds admitting it.
            pub fn catalogue() -> Vec<(&'static str, Vec<Kind>)> {
                vec![$(($tag, vec![$(Kind::$kind),+]),)*]
            }
        }
    };
}

bodies! {
    "fsm_command" => FsmCommand(FsmCommand): [Command],
    "fanout" => Fanout(Fanout): [Command, Query],
    "open_session" => OpenSession(OpenSession): [Command],
    "control_session" => ControlSession(ControlSession): [Command],
    "close_session" => CloseSession(SessionRef): [Command],
    "allocate" => Allocate(AllocateRequest): [Command],
    "release" => Release(SessionRef): [Command],
    "scan" => Scan(Empty): [Command],
    "start_job" => StartJob(JobSpec): [Command],
    "stop_job" => StopJob(StopJob): [Command],
    "deregister" => Deregister(Deregister): [Command],
    "shutdown" => Shutdown(Empty): [Command],

    "node_ack" => NodeAck(NodeAck): [Ack, Result],
    "fanout_ack" => FanoutAck(FanoutAck): [Ack, Result],
    "ack" => Ack(Ack): [Ack],
    "registered" => Registered(Registered): [Ack],
    "published" => Published(Published): [Ack],

    "log_message" => LogMessage(LogMessage): [Publish],
    "subscription" => Subscription(Subscription): [Subscribe],
    "unsubscribe" => Unsubscribe(SubscriptionRef): [Unsubscribe],

    "probe" => Probe(Empty): [Query, Event],
    "state_query" => StateQuery(Empty): [Query],
    "resource_query" => ResourceQuery(ResourceQuery): [Query],
    "describe_partition" => DescribePartition(PartitionRef): [Query],
    "version_query" => VersionQuery(Empty): [Query],
    "message_query" => MessageQuery(MessageQuery): [Query],
    "stats_query" => StatsQuery(SubscriptionRef): [Query],
    "list_sessions" => ListSessions(Empty): [Query],
    "describe_session" => DescribeSession(SessionRef): [Query],
    "fsm_table_query" => FsmTableQuery(Empty): [Query],
    "job_status_query" => JobStatusQuery(JobRef): [Query],
    "list_jobs" => ListJobs(Empty): [Query],
    "list_proposals" => ListProposals(Empty): [Query],

    "probe_ok" => ProbeOk(ProbeOk): [Result],
    "resources" => Resources(Resources): [Result],
    "partition_tree" => PartitionTree(PartitionTree): [Result],
    "allocation" => Allocation(Allocation): [Result],
    "scan_report" => ScanReport(ScanReport): [Result],
    "messages" => Messages(Messages): [Result],
    "subscribed" => Subscribed(Subscribed): [Result],
    "delivery_stats" => DeliveryStats(DeliveryStats): [Result],
    "session" => Session(Session): [Result],
    "session_report" => SessionReport(SessionReport): [Result],
    "sessions" => Sessions(Sessions): [Result],
    "session_view" => SessionView(SessionView): [Result],
    "fsm_table" => FsmTable(FsmTable): [Result],
    "job_status" => JobStatus(JobStatus): [Result],
    "jobs" => Jobs(Jobs): [Result],
    "proposals" => Proposals(Proposals): [Result],
    "services" => Services(Services): [Result],
    "version" => Version(Version): [Result],

    "service_record" => ServiceRecord(ServiceRecord): [Register],
    "resource" => Resource(Resource): [Register],
    "partition" => Partition(Partition): [Register],

    "lookup" => Lookup(Lookup): [Lookup],

    "stored_message" => StoredMessage(StoredMessage): [Event],
    "suggestion" => Suggestion(Suggestion): [Event],

    "error" => Error(ErrorBody): [Error],
}
