#![allow(dead_code)]

use std::future::Future;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use axum::http::StatusCode;
use parking_lot::Mutex;
use rcms_client::{Caller, HttpTransport, Transport};
use rcms_core::ims::StoredMessage;
use rcms_core::wire::{Body, Envelope, Kind};
use rcms_service::server::{serve_handler, EnvelopeHandler, Reply, ServerHandle};

pub fn caller(source: &str) -> Caller {
    Caller::new(HttpTransport::shared(), source)
}

pub fn caller_on(transport: Arc<dyn Transport>, source: &str) -> Caller {
    Caller::new(transport, source)
}

/// A subscriber endpoint that records what it is pushed. While `down` it
/// answers 503 to everything.
#[derive(Default)]
pub struct Receiver {
    pub messages: Mutex<Vec<StoredMessage>>,
    pub down: AtomicBool,
    pub refused: AtomicU64,
}

impl Receiver {
    pub fn seqs(&self) -> Vec<u64> {
        self.messages.lock().iter().map(|m| m.seq).collect()
    }

    pub fn len(&self) -> usize {
        self.messages.lock().len()
    }

    pub fn set_down(&self, down: bool) {
        self.down.store(down, Ordering::SeqCst);
    }
}

#[async_trait]
impl EnvelopeHandler for Receiver {
    fn name(&self) -> String {
        "receiver".into()
    }

    async fn handle(&self, env: Envelope) -> Reply {
        if self.down.load(Ordering::SeqCst) {
            self.refused.fetch_add(1, Ordering::Relaxed);
            return Reply::status(StatusCode::SERVICE_UNAVAILABLE);
        }
        match (&env.kind, &env.body) {
            (Kind::Event, Body::StoredMessage(m)) => {
                self.messages.lock().push(m.clone());
                Reply::status(StatusCode::NO_CONTENT)
            }
            (Kind::Event, Body::Probe(_)) => Reply::status(StatusCode::NO_CONTENT),
            _ => Reply::status(StatusCode::BAD_REQUEST),
        }
    }
}

pub async fn receiver() -> (Arc<Receiver>, ServerHandle) {
    let r = Arc::new(Receiver::default());
    let server = serve_handler(r.clone(), "127.0.0.1:0").await.unwrap();
    (r, server)
}

/// Polls `cond` until it holds or `limit` passes.
pub async fn eventually<F, Fut>(limit: Duration, mut cond: F) -> bool
where
    F: FnMut() -> Fut,
    Fut: Future<Output = bool>,
{
    let start = Instant::now();
    loop {
        if cond().await {
            return true;
        }
        if start.elapsed() > limit {
            return false;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}
