use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use proptest::prelude::*;
use rcms_core::control::{ChildOutcome, FailureCode, Outcome, Selector};
use rcms_core::fsm::{FsmCommand, FsmState, Verb};
use rcms_core::ims::{Criteria, MessageQuery, StoredMessage};
use rcms_core::model::{LogMessage, Severity, Subscription};
use rcms_core::wire::*;
use rcms_core::Timestamp;
use uuid::Uuid;

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/command_envelope.json")
}

fn golden_envelope() -> Envelope {
    let mut cmd = FsmCommand::new(Verb::Configure);
    cmd.parameters.insert("run_type".into(), "cosmics".into());
    cmd.parameters.insert("mode".into(), "global".into());
    Envelope {
        id: Uuid::parse_str("6f1c2a4e-93b0-4d1e-8a57-0c2f9e4b7d10").unwrap(),
        kind: Kind::Command,
        correlation_id: None,
        session_id: Some("session-7".into()),
        source: "smr".into(),
        target: "fm/daq".into(),
        issued_at: "2024-03-01T12:34:56.789012Z".parse().unwrap(),
        body: Body::Fanout(Fanout {
            action: FanoutAction::Command(cmd),
            selector: Selector::Role("readout".into()),
        }),
    }
}

#[test]
fn golden_bytes() {
    let bytes = golden_envelope().encode().unwrap();
    if std::env::var_os("RCMS_BLESS").is_some() {
        std::fs::write(golden_path(), &bytes).unwrap();
    }
    let expected = std::fs::read(golden_path()).expect("golden file missing; run with RCMS_BLESS=1 once");
    assert_eq!(String::from_utf8(bytes).unwrap(), String::from_utf8(expected).unwrap());
    assert_eq!(Envelope::decode(&std::fs::read(golden_path()).unwrap()).unwrap(), golden_envelope());
}

#[test]
fn encoding_is_deterministic() {
    let e = golden_envelope();
    assert_eq!(e.encode().unwrap(), e.encode().unwrap());
}

fn text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 _/.\\-\"\\\\é]{0,16}"
}

fn timestamp() -> impl Strategy<Value = Timestamp> {
    (0i64..4_000_000_000_000_000).prop_map(Timestamp::from_micros)
}

fn severity() -> impl Strategy<Value = Severity> {
    prop::sample::select(Severity::ALL.to_vec())
}

fn log_message() -> impl Strategy<Value = LogMessage> {
    (text(), text(), severity(), timestamp(), text()).prop_map(|(source, msg_type, severity, ts, payload)| {
        LogMessage::new(source, msg_type, severity, payload).at(ts)
    })
}

fn command() -> impl Strategy<Value = FsmCommand> {
    (prop::sample::select(Verb::ALL.to_vec()), prop::collection::btree_map(text(), text(), 0..3))
        .prop_map(|(verb, parameters)| FsmCommand { verb, parameters })
}

fn state() -> impl Strategy<Value = FsmState> {
    prop::sample::select(vec![
        FsmState::Initial,
        FsmState::Halted,
        FsmState::Configured,
        FsmState::Running,
        FsmState::Paused,
        FsmState::Failed,
        FsmState::Mixed,
    ])
}

fn outcome() -> impl Strategy<Value = ChildOutcome> {
    let ok = state().prop_map(|state| Outcome::Ok { state });
    let err = (
        prop::sample::select(vec![FailureCode::Timeout, FailureCode::Transport, FailureCode::IllegalTransition]),
        text(),
    )
        .prop_map(|(code, message)| Outcome::Err { code, message });
    (text(), prop_oneof![ok, err]).prop_map(|(child, outcome)| ChildOutcome { child, outcome })
}

fn request_body() -> impl Strategy<Value = (Kind, Body)> {
    prop_oneof![
        command().prop_map(|c| (Kind::Command, Body::FsmCommand(c))),
        (command(), prop::option::of(text())).prop_map(|(c, role)| (
            Kind::Command,
            Body::Fanout(Fanout {
                action: FanoutAction::Command(c),
                selector: role.map_or(Selector::All, Selector::Role),
            })
        )),
        log_message().prop_map(|m| (Kind::Publish, Body::LogMessage(m))),
        (text(), severity(), prop::option::of(prop::collection::btree_set(text(), 0..3)), prop::option::of(timestamp()))
            .prop_map(|(pattern, min, types, since)| (
                Kind::Subscribe,
                Body::Subscription(Subscription {
                    id: String::new(),
                    source_pattern: pattern,
                    min_severity: min,
                    msg_types: types,
                    since,
                    callback_url: "http://127.0.0.1:1/cb".into(),
                })
            )),
        (prop::option::of(severity()), 0u64..100, prop::option::of(1usize..50)).prop_map(|(s, after, limit)| {
            let mut q = MessageQuery::new(Criteria { min_severity: s, ..Criteria::default() }).after(after);
            q.limit = limit;
            (Kind::Query, Body::MessageQuery(q))
        }),
        (1u64..10_000, log_message(), timestamp(), text()).prop_map(|(seq, msg, received_at, instance_id)| (
            Kind::Event,
            Body::StoredMessage(StoredMessage { seq, msg, received_at, instance_id })
        )),
        text().prop_map(|name| (Kind::Lookup, Body::Lookup(Lookup { name }))),
    ]
}

fn reply_body() -> impl Strategy<Value = (Kind, Body)> {
    prop_oneof![
        (text(), state()).prop_map(|(node_id, state)| (Kind::Ack, Body::NodeAck(NodeAck { node_id, state }))),
        (prop::collection::vec(outcome(), 0..5), any::<u32>()).prop_map(|(outcomes, us)| (
            Kind::Ack,
            Body::FanoutAck(FanoutAck { outcomes, elapsed_us: us as u64 })
        )),
        any::<u64>().prop_map(|seq| (Kind::Ack, Body::Published(Published { seq }))),
        (text(), text(), prop::collection::vec(text(), 0..3), prop::option::of(text())).prop_map(
            |(code, message, ids, holder)| (Kind::Error, Body::Error(ErrorBody { code, message, ids, holder }))
        ),
    ]
}

fn envelope() -> impl Strategy<Value = Envelope> {
    let req = (request_body(), Just(None::<u128>));
    let rep = (reply_body(), any::<u128>().prop_map(Some));
    (prop_oneof![req, rep], any::<u128>(), prop::option::of(text()), text(), text(), timestamp()).prop_map(
        |(((kind, body), corr), id, session_id, source, target, issued_at)| Envelope {
            id: Uuid::from_u128(id),
            kind,
            correlation_id: corr.map(Uuid::from_u128),
            session_id,
            source,
            target,
            issued_at,
            body,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn round_trip(e in envelope()) {
        let bytes = e.encode().unwrap();
        let back = Envelope::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &e);
        prop_assert_eq!(back.encode().unwrap(), bytes);
    }
}

#[test]
fn ignores_unknown_top_level_and_nested() {
    let e = golden_envelope();
    let mut v: serde_json::Value = serde_json::from_slice(&e.encode().unwrap()).unwrap();
    v["x"] = 1.into();
    assert_eq!(Envelope::decode(&serde_json::to_vec(&v).unwrap()).unwrap(), e);
}

#[test]
fn kind_body_catalogue_is_consistent() {
    let mut kinds_used = BTreeSet::new();
    for (_, kinds) in Body::catalogue() {
        kinds_used.extend(kinds.iter().map(|k| k.as_str()));
    }
    let all: BTreeSet<_> = Kind::ALL.iter().map(|k| k.as_str()).collect();
    assert_eq!(kinds_used, all);
    let tags: BTreeMap<_, _> = Body::catalogue().into_iter().collect();
    assert_eq!(tags.len(), Body::catalogue().len());
}
