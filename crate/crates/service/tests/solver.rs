mod common;

use std::sync::Arc;
use std::time::Duration;

use rcms_client::{CollectingSink, HttpTransport, ImsClient, Instrumented, MessageSink, NullSink, ResourceClient};
use rcms_core::control::ExpansionTable;
use rcms_core::ims::{Criteria, MessageQuery, SharedStore};
use rcms_core::model::{LogMessage, Severity};
use rcms_core::solver::{parse_rules, RuleAction};
use rcms_core::wire::Kind;
use rcms_service::fm::FmConfig;
use rcms_service::ims::{ImsConfig, ImsInstance};
use rcms_service::session::SessionManager;
use rcms_service::solver::SolverService;

const RULES: &str = r#"{"rules":[
    {"id":"errors","pattern":{"source_pattern":"node/*","min_severity":"error"},
     "threshold":3,"window_ms":10000,"action":{"type":"notify","text":"node errors piling up"}},
    {"id":"halt-daq","pattern":{"source_pattern":"node/*","min_severity":"fatal"},
     "threshold":1,"window_ms":1000,"action":{"type":"propose","verb":"halt","partition_id":"daq"}}
]}"#;

fn alarm(sev: Severity, i: u64) -> LogMessage {
    LogMessage::new(format!("node/{i}"), "alarm", sev, format!("alarm {i}"))
}

#[tokio::test]
async fn end_to_end_through_the_monitor() {
    let transport = Instrumented::new(HttpTransport::shared());
    let caller = common::caller_on(transport.clone(), "solver");
    let store = SharedStore::memory();
    let ims = ImsInstance::new("ims-0", store.connect().unwrap(), common::caller("ims"), ImsConfig::default());
    let ims_server = ims.spawn("127.0.0.1:0").await.unwrap();
    let ims_client = Arc::new(ImsClient::new(caller.clone(), vec![ims_server.url()]));

    let rs = rcms_service::resource::ResourceService::new(common::caller("rs"));
    let rs_server = rs.spawn("127.0.0.1:0").await.unwrap();
    let sm = SessionManager::new(
        common::caller("sm"),
        ResourceClient::new(common::caller("sm"), rs_server.url()),
        Arc::new(NullSink),
        ExpansionTable::default(),
        FmConfig::default(),
    );
    let sm_server = sm.spawn("127.0.0.1:0").await.unwrap();

    let sink: Arc<dyn MessageSink> = ims_client.clone();
    let solver = SolverService::start(parse_rules(RULES).unwrap(), caller, sink, Some(sm_server.url())).unwrap();
    let solver_server = solver.spawn("127.0.0.1:0").await.unwrap();
    let sub = solver
        .subscribe(&ims_client, &ims_server.url(), &solver_server.url())
        .await
        .unwrap()
        .expect("rules want a subscription");
    assert_eq!(sub.backfill, 0);

    for i in 0..3 {
        ims.publish(alarm(Severity::Error, i)).await.unwrap();
        ims.publish(alarm(Severity::Info, i)).await.unwrap();
    }
    ims.publish(alarm(Severity::Fatal, 9)).await.unwrap();

    let ok = common::eventually(Duration::from_secs(10), || async { sm.proposals().len() == 1 }).await;
    assert!(ok, "no proposal arrived");
    let p = &sm.proposals()[0];
    assert_eq!(p.rule_id, "halt-daq");
    assert_eq!(
        p.action,
        RuleAction::Propose {
            verb: "halt".into(),
            partition_id: "daq".into()
        }
    );
    assert_eq!(p.evidence, [7]);

    let q = MessageQuery::new(Criteria::all().source("solver"));
    let ok = common::eventually(Duration::from_secs(10), || async { ims.query(&q).await.unwrap().len() == 1 }).await;
    assert!(ok, "notification never reached the monitor");
    let warn = &ims.query(&q).await.unwrap()[0];
    assert_eq!(warn.msg.severity, Severity::Warn);
    assert!(warn.msg.payload.contains("node errors piling up"));
    // Each rule fired once; the notification does not match the subscription.
    solver.wait_processed(solver.received()).await;
    assert_eq!(solver.proposals().len(), 2);

    let sent = transport.sent();
    assert!(sent.iter().all(|s| s.kind != Kind::Command), "{sent:?}");
    assert!(sent.iter().any(|s| s.kind == Kind::Event && s.body == "suggestion"));
}

#[tokio::test]
async fn empty_ruleset_subscribes_to_nothing() {
    let ims = ImsInstance::new(
        "ims-0",
        SharedStore::memory().connect().unwrap(),
        common::caller("ims"),
        ImsConfig::default(),
    );
    let ims_server = ims.spawn("127.0.0.1:0").await.unwrap();
    let client = ImsClient::new(common::caller("solver"), vec![ims_server.url()]);
    let solver = SolverService::start(Vec::new(), common::caller("solver"), Arc::new(NullSink), None).unwrap();
    let server = solver.spawn("127.0.0.1:0").await.unwrap();
    assert!(solver.subscribe(&client, &ims_server.url(), &server.url()).await.unwrap().is_none());
    assert!(ims.subscriptions().is_empty());
}

#[tokio::test]
async fn merged_subscription_covers_every_rule() {
    let (_rx, rx_server) = common::receiver().await;
    let ims = ImsInstance::new(
        "ims-0",
        SharedStore::memory().connect().unwrap(),
        common::caller("ims"),
        ImsConfig::default(),
    );
    let ims_server = ims.spawn("127.0.0.1:0").await.unwrap();
    let client = ImsClient::new(common::caller("solver"), vec![ims_server.url()]);
    let solver =
        SolverService::start(parse_rules(RULES).unwrap(), common::caller("solver"), Arc::new(NullSink), None).unwrap();
    solver.subscribe(&client, &ims_server.url(), &rx_server.url()).await.unwrap();
    let subs = ims.subscriptions();
    assert_eq!(subs.len(), 1);
    assert_eq!(subs[0].source_pattern, "node/*");
    assert_eq!(subs[0].min_severity, Severity::Error);
}

#[tokio::test]
async fn proposals_are_served_and_cooldown_holds() {
    let rules = parse_rules(
        r#"{"rules":[{"id":"r","pattern":{"min_severity":"error"},"threshold":2,"window_ms":60000,
            "cooldown_ms":60000,"action":{"type":"notify","text":"x"}}]}"#,
    )
    .unwrap();
    let sink = CollectingSink::new();
    let solver = SolverService::start(rules, common::caller("solver"), sink.clone(), None).unwrap();
    let server = solver.spawn("127.0.0.1:0").await.unwrap();
    let store = SharedStore::memory().connect().unwrap();
    for i in 0..10 {
        let m = store
            .append(alarm(Severity::Error, i), rcms_core::time::Timestamp::now(), "ims-0")
            .await
            .unwrap();
        common::caller("ims").push(&server.url(), Kind::Event, m).await.unwrap();
    }
    solver.wait_processed(10).await;
    assert_eq!(solver.proposals().len(), 1);
    assert_eq!(sink.messages().len(), 1);
    let body = common::caller("test")
        .call(&server.url(), Kind::Query, rcms_core::wire::Body::ListProposals(Default::default()))
        .await
        .unwrap();
    match body {
        rcms_core::wire::Body::Proposals(p) => assert_eq!(p.proposals.len(), 1),
        other => panic!("unexpected {other:?}"),
    }
}
