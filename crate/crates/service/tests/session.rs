mod common;

use std::sync::Arc;
use std::time::Duration;

use rcms_client::{CollectingSink, MessageSink, NullSink, ResourceClient, SessionClient};
use rcms_core::control::{ExpansionTable, Strategy};
use rcms_core::fsm::FsmState;
use rcms_core::model::{Partition, Severity};
use rcms_core::wire::WireError;
use rcms_service::fm::FmConfig;
use rcms_service::resource::ResourceService;
use rcms_service::server::ServerHandle;
use rcms_service::session::SessionManager;
use rcms_service::simnode::{spawn_nodes, FailMode, NodeSpec, SimNodeHandle};

struct Rig {
    rs: Arc<ResourceService>,
    sm: Arc<SessionManager>,
    resources: ResourceClient,
    client: SessionClient,
    _servers: Vec<ServerHandle>,
}

async fn rig(table: ExpansionTable, config: FmConfig, sink: Arc<dyn MessageSink>) -> Rig {
    let rs = ResourceService::new(common::caller("rs"));
    let rs_server = rs.spawn("127.0.0.1:0").await.unwrap();
    let sm = SessionManager::new(
        common::caller("sm"),
        ResourceClient::new(common::caller("sm"), rs_server.url()),
        sink,
        table,
        config,
    );
    let sm_server = sm.spawn("127.0.0.1:0").await.unwrap();
    let client = SessionClient::new(common::caller("test"), sm_server.url());
    Rig {
        rs,
        sm,
        resources: ResourceClient::new(common::caller("test"), rs_server.url()),
        client,
        _servers: vec![rs_server, sm_server],
    }
}

async fn register(rig: &Rig, nodes: &[SimNodeHandle], role: &str) {
    for n in nodes {
        rig.resources.register_resource(n.resource(role).exclusive(true)).await.unwrap();
    }
}

async fn define(rig: &Rig, p: Partition) {
    rig.resources.define_partition(p).await.unwrap();
}

fn ids(nodes: &[SimNodeHandle]) -> Vec<String> {
    nodes.iter().map(|n| n.id().to_string()).collect()
}

fn remote_code(e: WireError) -> String {
    match e {
        WireError::Remote(b) => b.code,
        other => panic!("expected remote error, got {other:?}"),
    }
}

#[tokio::test]
async fn happy_path_reaches_running() {
    let rig = rig(ExpansionTable::default(), FmConfig::default(), Arc::new(NullSink)).await;
    let nodes = spawn_nodes(8, &NodeSpec::default()).await.unwrap();
    register(&rig, &nodes, "readout").await;
    define(&rig, Partition::new("p", ids(&nodes))).await;
    let s = rig.client.open("p", "alice").await.unwrap();
    assert_eq!(s.state, FsmState::Initial);
    for verb in ["initialize", "configure", "start"] {
        let r = rig.client.control(&s.id, verb).await.unwrap();
        assert!(r.failed.is_empty(), "{verb}: {:?}", r.failed);
    }
    let view = rig.client.describe(&s.id).await.unwrap();
    assert_eq!(view.session.state, FsmState::Running);
    assert_eq!(view.leaf_states.len(), 8);
    for n in &nodes {
        assert_eq!(n.node.state().await, FsmState::Running);
    }
    assert_eq!(rig.client.list().await.unwrap().len(), 1);
}

#[tokio::test]
async fn illegal_verb_is_reported_and_changes_nothing() {
    let rig = rig(ExpansionTable::default(), FmConfig::default(), Arc::new(NullSink)).await;
    let nodes = spawn_nodes(4, &NodeSpec::default()).await.unwrap();
    register(&rig, &nodes, "readout").await;
    define(&rig, Partition::new("p", ids(&nodes))).await;
    let s = rig.client.open("p", "alice").await.unwrap();
    rig.client.control(&s.id, "initialize").await.unwrap();
    let r = rig.client.control(&s.id, "start").await.unwrap();
    assert!(r.is_partial_failure());
    assert_eq!(r.failed.len(), 4);
    assert_eq!(r.state, FsmState::Halted);
    for n in &nodes {
        assert_eq!(n.node.state().await, FsmState::Halted);
    }
    assert_eq!(remote_code(rig.client.control(&s.id, "fly").await.unwrap_err()), "UnknownVerb");
}

#[tokio::test]
async fn one_faulty_leaf_gives_mixed() {
    let rig = rig(ExpansionTable::default(), FmConfig::default(), Arc::new(NullSink)).await;
    let nodes = spawn_nodes(8, &NodeSpec::default()).await.unwrap();
    nodes[5].node.set_fail_mode(FailMode::Error);
    register(&rig, &nodes, "readout").await;
    define(&rig, Partition::new("p", ids(&nodes))).await;
    let s = rig.client.open("p", "alice").await.unwrap();
    let r = rig.client.control(&s.id, "initialize").await.unwrap();
    assert_eq!(r.state, FsmState::Mixed);
    assert_eq!(r.failed, [nodes[5].id().to_string()]);
    assert_eq!(r.outcomes.len(), 8);
}

#[tokio::test]
async fn close_twice_is_a_no_op() {
    let rig = rig(ExpansionTable::default(), FmConfig::default(), Arc::new(NullSink)).await;
    let nodes = spawn_nodes(2, &NodeSpec::default()).await.unwrap();
    register(&rig, &nodes, "readout").await;
    define(&rig, Partition::new("p", ids(&nodes))).await;
    let s = rig.client.open("p", "alice").await.unwrap();
    rig.client.control(&s.id, "initialize").await.unwrap();
    rig.client.close(&s.id).await.unwrap();
    rig.client.close(&s.id).await.unwrap();
    assert!(rig.rs.read(|r| r.allocation(&s.id).is_none()));
    assert_eq!(nodes[0].node.state().await, FsmState::Halted);
    assert_eq!(remote_code(rig.client.control(&s.id, "configure").await.unwrap_err()), "SessionClosed");
    assert_eq!(remote_code(rig.client.close("session-99").await.unwrap_err()), "SessionClosed");
    // The partition is free again.
    rig.client.open("p", "bob").await.unwrap();
}

#[tokio::test]
async fn close_releases_even_when_leaves_are_gone() {
    let sink = CollectingSink::new();
    let rig = rig(ExpansionTable::default(), FmConfig::default(), sink.clone()).await;
    let mut nodes = spawn_nodes(3, &NodeSpec::default()).await.unwrap();
    register(&rig, &nodes, "readout").await;
    define(&rig, Partition::new("p", ids(&nodes))).await;
    let s = rig.client.open("p", "alice").await.unwrap();
    rig.client.control(&s.id, "initialize").await.unwrap();
    rig.client.control(&s.id, "configure").await.unwrap();
    for n in &mut nodes {
        n.kill().await;
    }
    rig.client.close(&s.id).await.unwrap();
    assert!(rig.rs.read(|r| r.allocation(&s.id).is_none()));
    let warns: Vec<_> = sink
        .messages()
        .into_iter()
        .filter(|m| m.severity == Severity::Warn)
        .collect();
    assert_eq!(warns.len(), 3, "{warns:?}");
    assert!(warns.iter().all(|m| m.source == format!("session-manager/{}", s.id)));
    let infos = sink.messages().into_iter().filter(|m| m.severity == Severity::Info).count();
    assert_eq!(infos, 2);
}

#[tokio::test]
async fn disjoint_sessions_open_concurrently_and_shared_ones_conflict() {
    let rig = Arc::new(rig(ExpansionTable::default(), FmConfig::default(), Arc::new(NullSink)).await);
    let nodes = spawn_nodes(6, &NodeSpec::default()).await.unwrap();
    register(&rig, &nodes, "readout").await;
    let all = ids(&nodes);
    define(&rig, Partition::new("a", all[..3].to_vec())).await;
    define(&rig, Partition::new("b", all[3..].to_vec())).await;
    define(&rig, Partition::new("ab", all[2..4].to_vec())).await;
    let (ra, rb) = tokio::join!(rig.client.open("a", "alice"), rig.client.open("b", "bob"));
    let (sa, sb) = (ra.unwrap(), rb.unwrap());
    assert_ne!(sa.id, sb.id);
    let err = rig.client.open("ab", "carol").await.unwrap_err();
    match err {
        WireError::Remote(b) => {
            assert_eq!(b.code, "ContentionConflict");
            assert_eq!(b.ids, [all[2].clone(), all[3].clone()]);
        }
        other => panic!("unexpected {other:?}"),
    }
    let (x, y) = tokio::join!(
        rig.client.control(&sa.id, "initialize"),
        rig.client.control(&sb.id, "initialize")
    );
    assert!(x.unwrap().failed.is_empty());
    assert!(y.unwrap().failed.is_empty());
    assert_eq!(rig.client.list().await.unwrap().len(), 2);
}

#[tokio::test]
async fn two_phase_configure_goes_readout_first() {
    let table = ExpansionTable::from_json(
        r#"{"entries":[{"subsystem":"daq","verb":"configure","phases":[
            {"selector":{"role":"readout"},"verb":"configure"},
            {"selector":{"role":"builder"},"verb":"configure","parameters":{"mode":"fast"}}
        ]}]}"#,
    )
    .unwrap();
    let sink = CollectingSink::new();
    let rig = rig(table, FmConfig::default(), sink.clone()).await;
    let readout = spawn_nodes(3, &NodeSpec::default()).await.unwrap();
    let builders = spawn_nodes(
        2,
        &NodeSpec {
            id_prefix: Some("eb".into()),
            ..Default::default()
        },
    )
    .await
    .unwrap();
    register(&rig, &readout, "readout").await;
    register(&rig, &builders, "builder").await;
    let mut all = ids(&readout);
    all.extend(ids(&builders));
    define(&rig, Partition::new("p", all).with_subsystem("daq")).await;
    let s = rig.client.open("p", "alice").await.unwrap();
    rig.client.control(&s.id, "initialize").await.unwrap();
    let r = rig.client.control(&s.id, "configure").await.unwrap();
    assert_eq!(r.steps_run, 2);
    assert_eq!(r.state, FsmState::Configured);
    let order: Vec<&str> = r.outcomes.iter().map(|o| o.child.as_str()).collect();
    assert_eq!(order, ["node-000", "node-001", "node-002", "eb-000", "eb-001"]);
    let steps: Vec<String> = sink
        .messages()
        .into_iter()
        .filter(|m| m.payload.starts_with("configure step"))
        .map(|m| m.payload)
        .collect();
    assert_eq!(steps.len(), 2);
    assert!(steps[0].contains("role=readout"));
    assert!(steps[1].contains("role=builder"));
}

#[tokio::test]
async fn failing_first_phase_stops_the_plan() {
    let table = ExpansionTable::from_json(
        r#"{"entries":[{"subsystem":"default","verb":"configure","phases":[
            {"selector":{"role":"readout"},"verb":"configure"},
            {"selector":{"role":"builder"},"verb":"configure"}
        ]}]}"#,
    )
    .unwrap();
    let rig = rig(table, FmConfig::default(), Arc::new(NullSink)).await;
    let readout = spawn_nodes(2, &NodeSpec::default()).await.unwrap();
    let builders = spawn_nodes(
        2,
        &NodeSpec {
            id_prefix: Some("eb".into()),
            ..Default::default()
        },
    )
    .await
    .unwrap();
    register(&rig, &readout, "readout").await;
    register(&rig, &builders, "builder").await;
    let mut all = ids(&readout);
    all.extend(ids(&builders));
    define(&rig, Partition::new("p", all)).await;
    let s = rig.client.open("p", "alice").await.unwrap();
    rig.client.control(&s.id, "initialize").await.unwrap();
    readout[1].node.set_fail_mode(FailMode::Error);
    let r = rig.client.control(&s.id, "configure").await.unwrap();
    assert_eq!(r.steps_run, 1);
    assert_eq!(r.failed, ["node-001"]);
    for b in &builders {
        assert_eq!(b.node.state().await, FsmState::Halted);
    }
}

#[tokio::test]
async fn nested_partitions_control_every_leaf_once() {
    for strategy in Strategy::ALL {
        let config = FmConfig::default().with_strategy(strategy);
        let rig = rig(ExpansionTable::default(), config, Arc::new(NullSink)).await;
        let nodes = spawn_nodes(7, &NodeSpec::default()).await.unwrap();
        register(&rig, &nodes, "readout").await;
        let n = ids(&nodes);
        // node-003 is listed by both children; the first in pre-order owns it.
        define(&rig, Partition::new("daq", n[0..4].to_vec())).await;
        define(&rig, Partition::new("trg", n[3..6].to_vec())).await;
        define(&rig, Partition::new("empty", Vec::<String>::new())).await;
        define(&rig, Partition::new("top", [n[6].clone()]).with_children(["daq", "trg", "empty"])).await;
        let s = rig.client.open("top", "alice").await.unwrap();
        let r = rig.client.control(&s.id, "initialize").await.unwrap();
        assert!(r.failed.is_empty(), "{strategy:?}");
        assert_eq!(r.outcomes.len(), 7, "{strategy:?}");
        for node in &nodes {
            assert_eq!(node.node.commands_seen(), 1, "{strategy:?} {}", node.id());
            assert_eq!(node.node.state().await, FsmState::Halted);
        }
        let view = rig.client.describe(&s.id).await.unwrap();
        assert_eq!(view.partitions.len(), 4);
        assert_eq!(view.leaf_states.len(), 7);
        rig.client.close(&s.id).await.unwrap();
        rig.sm.shutdown().await;
    }
}

#[tokio::test]
async fn failed_open_releases_the_allocation() {
    let rig = rig(ExpansionTable::default(), FmConfig::default(), Arc::new(NullSink)).await;
    define(&rig, Partition::new("void", Vec::<String>::new())).await;
    assert_eq!(remote_code(rig.client.open("void", "alice").await.unwrap_err()), "NoChildren");
    assert_eq!(remote_code(rig.client.open("nope", "alice").await.unwrap_err()), "UnknownPartition");
    assert!(rig.client.list().await.unwrap().is_empty());
    assert!(rig.rs.read(|r| r.allocation("session-1").is_none()));
}

#[tokio::test]
async fn control_of_a_busy_session_waits_its_turn() {
    let rig = Arc::new(rig(ExpansionTable::default(), FmConfig::default(), Arc::new(NullSink)).await);
    let nodes = spawn_nodes(
        3,
        &NodeSpec {
            delay: Duration::from_millis(50),
            ..Default::default()
        },
    )
    .await
    .unwrap();
    register(&rig, &nodes, "readout").await;
    define(&rig, Partition::new("p", ids(&nodes))).await;
    let s = rig.client.open("p", "alice").await.unwrap();
    let (a, b) = tokio::join!(
        rig.client.control(&s.id, "initialize"),
        rig.client.control(&s.id, "configure")
    );
    // Plans run one at a time, in arrival order.
    assert!(a.unwrap().failed.is_empty());
    let b = b.unwrap();
    assert!(b.failed.is_empty());
    assert_eq!(b.state, FsmState::Configured);
}
