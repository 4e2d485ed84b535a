//! A trivial logging service used to measure registry-based load balancing.
//! Each instance handles one request at a time for a fixed service time.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use rcms_core::wire::{Body, Envelope, Kind, ProbeOk, Published};

use crate::server::{serve_handler, EnvelopeHandler, Reply, ServerHandle};

pub const SERVICE_NAME: &str = "log";

pub struct LogService {
    id: String,
    service_time: Duration,
    busy: tokio::sync::Mutex<()>,
    handled: AtomicU64,
}

impl LogService {
    pub fn new(id: impl Into<String>, service_time: Duration) -> Arc<Self> {
        Arc::new(Self {
            id: id.into(),
            service_time,
            busy: tokio::sync::Mutex::new(()),
            handled: AtomicU64::new(0),
        })
    }

    pub fn handled(&self) -> u64 {
        self.handled.load(Ordering::Relaxed)
    }

    pub async fn spawn(self: &Arc<Self>, addr: &str) -> std::io::Result<ServerHandle> {
        serve_handler(self.clone(), addr).await
    }
}

#[async_trait]
impl EnvelopeHandler for LogService {
    fn name(&self) -> String {
        self.id.clone()
    }

    async fn handle(&self, env: Envelope) -> Reply {
        match (&env.kind, &env.body) {
            (Kind::Publish, Body::LogMessage(_)) => {
                let _one = self.busy.lock().await;
                tokio::time::sleep(self.service_time).await;
                let seq = self.handled.fetch_add(1, Ordering::Relaxed) + 1;
                Reply::to(&env, &self.id, Kind::Ack, Published { seq })
            }
            (Kind::Query, Body::Probe(_)) => Reply::to(
                &env,
                &self.id,
                Kind::Result,
                ProbeOk {
                    service: SERVICE_NAME.into(),
                },
            ),
            _ => Reply::unsupported(&env, &self.id),
        }
    }
}
