use std::time::Duration;

use proptest::prelude::*;
use rcms_core::fsm::{self, FsmCommand, FsmState, Verb};
use rcms_core::wire::{Body, Envelope, Kind};
use rcms_service::logsvc::LogService;
use rcms_service::server::EnvelopeHandler;
use rcms_service::simnode::SimNode;

fn verbs() -> impl Strategy<Value = Vec<Verb>> {
    prop::collection::vec(prop::sample::select(Verb::ALL.to_vec()), 0..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn node_follows_the_table(seq in verbs()) {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async {
            let node = SimNode::new("n", Duration::ZERO);
            let mut model = FsmState::Initial;
            for verb in seq {
                let cmd = FsmCommand::new(verb);
                let env = Envelope::new(Kind::Command, "t", "n", cmd.clone());
                let rep = node.handle(env).await;
                match fsm::transition(model, &cmd) {
                    Ok(next) => {
                        prop_assert_eq!(rep.env.as_ref().map(|e| e.kind), Some(Kind::Ack));
                        model = next;
                    }
                    Err(_) => {
                        let code = match rep.env.map(|e| e.body) {
                            Some(Body::Error(e)) => e.code,
                            other => panic!("unexpected {other:?}"),
                        };
                        prop_assert_eq!(code, "IllegalTransition");
                    }
                }
                prop_assert_eq!(node.state().await, model);
            }
            Ok(())
        })?;
    }
}

#[tokio::test]
async fn log_service_serializes_requests() {
    let svc = LogService::new("log-0", Duration::from_millis(20));
    let start = std::time::Instant::now();
    let calls = (0..5).map(|i| {
        let svc = svc.clone();
        async move {
            let msg = rcms_core::model::LogMessage::new("c", "t", rcms_core::model::Severity::Info, format!("{i}"));
            svc.handle(Envelope::new(Kind::Publish, "c", "log-0", msg)).await
        }
    });
    let replies = futures::future::join_all(calls).await;
    assert!(start.elapsed() >= Duration::from_millis(100));
    assert_eq!(svc.handled(), 5);
    let mut seqs: Vec<u64> = replies
        .into_iter()
        .map(|r| match r.env.unwrap().body {
            Body::Published(p) => p.seq,
            other => panic!("unexpected {other:?}"),
        })
        .collect();
    seqs.sort();
    assert_eq!(seqs, [1, 2, 3, 4, 5]);
}
