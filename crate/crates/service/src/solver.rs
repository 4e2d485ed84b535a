//! Problem solver: receives monitor messages as a subscriber and runs the
//! rule engine over them in arrival order.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use axum::http::StatusCode;
use parking_lot::Mutex;
use rcms_client::{Caller, ImsClient, MessageSink};
use rcms_core::ims::StoredMessage;
use rcms_core::model::{LogMessage, Severity};
use rcms_core::solver::{merged_subscription, Engine, Proposal, Rule, RuleAction, SolverError};
use rcms_core::wire::*;
use tokio::sync::{mpsc, watch};

use crate::server::{serve_handler, EnvelopeHandler, Reply, ServerHandle};

pub const SOURCE: &str = "solver";

pub struct SolverService {
    queue: mpsc::UnboundedSender<StoredMessage>,
    rules: Vec<Rule>,
    proposals: Arc<Mutex<Vec<Proposal>>>,
    processed: watch::Receiver<u64>,
    received: AtomicU64,
}

impl SolverService {
    /// Starts the evaluation loop. Proposals with a propose action go to
    /// `session_url` as suggestion events when one is given.
    pub fn start(
        rules: Vec<Rule>,
        caller: Caller,
        sink: Arc<dyn MessageSink>,
        session_url: Option<String>,
    ) -> Result<Arc<Self>, SolverError> {
        let mut engine = Engine::new(rules.clone())?.ignore_source(SOURCE);
        let (tx, mut rx) = mpsc::unbounded_channel::<StoredMessage>();
        let (done_tx, done_rx) = watch::channel(0u64);
        let proposals = Arc::new(Mutex::new(Vec::new()));
        let fired = proposals.clone();
        tokio::spawn(async move {
            let mut n = 0u64;
            while let Some(m) = rx.recv().await {
                for p in engine.ingest(&m) {
                    fired.lock().push(p.clone());
                    emit(&caller, sink.as_ref(), session_url.as_deref(), p).await;
                }
                n += 1;
                let _ = done_tx.send(n);
            }
        });
        Ok(Arc::new(Self {
            queue: tx,
            rules,
            proposals,
            processed: done_rx,
            received: AtomicU64::new(0),
        }))
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn proposals(&self) -> Vec<Proposal> {
        self.proposals.lock().clone()
    }

    pub fn received(&self) -> u64 {
        self.received.load(Ordering::Relaxed)
    }

    /// Feeds one message into the evaluation queue.
    pub fn offer(&self, m: StoredMessage) {
        self.received.fetch_add(1, Ordering::Relaxed);
        let _ = self.queue.send(m);
    }

    /// Resolves once `n` messages have been evaluated.
    pub async fn wait_processed(&self, n: u64) {
        let mut rx = self.processed.clone();
        let _ = rx.wait_for(|done| *done >= n).await;
    }

    /// Subscribes to `ims_url` with the union of the rule patterns. An
    /// empty ruleset subscribes to nothing.
    pub async fn subscribe(
        &self,
        ims: &ImsClient,
        ims_url: &str,
        callback_url: &str,
    ) -> Result<Option<Subscribed>, WireError> {
        match merged_subscription(&self.rules, callback_url) {
            Some(sub) => ims.subscribe(ims_url, sub).await.map(Some),
            None => Ok(None),
        }
    }

    pub async fn spawn(self: &Arc<Self>, addr: &str) -> std::io::Result<ServerHandle> {
        serve_handler(self.clone(), addr).await
    }
}

async fn emit(caller: &Caller, sink: &dyn MessageSink, session_url: Option<&str>, p: Proposal) {
    match &p.action {
        RuleAction::Notify { text } => {
            let body = format!("{text} (rule {}, evidence {:?})", p.rule_id, p.evidence);
            sink.publish(LogMessage::new(SOURCE, "solver", Severity::Warn, body)).await;
        }
        RuleAction::Propose { .. } => {
            let Some(url) = session_url else {
                tracing::info!(rule = %p.rule_id, "proposal with no session manager configured");
                return;
            };
            let s = Suggestion {
                rule_id: p.rule_id.clone(),
                action: p.action.clone(),
                evidence: p.evidence.clone(),
            };
            if let Err(e) = caller.push(url, Kind::Event, s).await {
                tracing::warn!(rule = %p.rule_id, "suggestion not delivered: {e}");
            }
        }
    }
}

#[async_trait]
impl EnvelopeHandler for SolverService {
    fn name(&self) -> String {
        SOURCE.into()
    }

    async fn handle(&self, env: Envelope) -> Reply {
        match (&env.kind, &env.body) {
            (Kind::Event, Body::StoredMessage(m)) => {
                self.offer(m.clone());
                Reply::status(StatusCode::NO_CONTENT)
            }
            (Kind::Event, Body::Probe(_)) => Reply::status(StatusCode::NO_CONTENT),
            (Kind::Query, Body::Probe(_)) => Reply::to(&env, SOURCE, Kind::Result, ProbeOk { service: SOURCE.into() }),
            (Kind::Query, Body::ListProposals(_)) => {
                let proposals = self
                    .proposals()
                    .into_iter()
                    .map(|p| Suggestion {
                        rule_id: p.rule_id,
                        action: p.action,
                        evidence: p.evidence,
                    })
                    .collect();
                Reply::to(&env, SOURCE, Kind::Result, Proposals { proposals })
            }
            _ => Reply::unsupported(&env, SOURCE),
        }
    }
}
