//! Load spread over log service instances found through the registry.

use std::time::{Duration, Instant};

use rcms_client::{Caller, HttpTransport, RegistryClient};
use rcms_core::model::{LogMessage, Severity};
use rcms_core::registry::ServiceRecord;
use rcms_core::wire::Kind;
use rcms_service::logsvc::{LogService, SERVICE_NAME};
use rcms_service::registry::RegistryService;

use crate::report::{BenchError, BenchResult, Params};
use crate::MIN_REPS;

pub const EXPERIMENT: &str = "registry";
pub const DEFAULT_SERVICE_TIME: Duration = Duration::from_millis(5);

#[derive(Debug, Clone)]
pub struct RegistryBench {
    pub ks: Vec<usize>,
    pub clients: usize,
    pub service_time: Duration,
    pub duration: Duration,
    pub reps: usize,
}

impl Default for RegistryBench {
    fn default() -> Self {
        Self {
            ks: (1..=4).collect(),
            clients: 15,
            service_time: DEFAULT_SERVICE_TIME,
            duration: Duration::from_secs(1),
            reps: MIN_REPS,
        }
    }
}

/// One run: `k` fresh instances register, every client looks them up and
/// sends round-robin starting at its own offset.
pub async fn run_once(b: &RegistryBench, k: usize) -> Result<f64, BenchError> {
    let registry = RegistryService::new(Duration::from_secs(600));
    let reg_server = registry
        .spawn("127.0.0.1:0")
        .await
        .map_err(|e| BenchError::PortExhaustion(e.to_string()))?;
    let caller = Caller::new(HttpTransport::shared(), "bench");
    let reg = RegistryClient::new(caller.clone(), reg_server.url());

    let mut services = Vec::new();
    for i in 0..k {
        let id = format!("log-{i}");
        let svc = LogService::new(id.clone(), b.service_time);
        let server = svc
            .spawn("127.0.0.1:0")
            .await
            .map_err(|e| BenchError::PortExhaustion(e.to_string()))?;
        reg.register(&ServiceRecord::new(SERVICE_NAME, id, server.url()))
            .await
            .map_err(|e| BenchError::RegistryUnavailable(e.to_string()))?;
        services.push((svc, server));
    }

    let start = Instant::now();
    let deadline = start + b.duration;
    let mut tasks = Vec::new();
    for c in 0..b.clients {
        let reg = RegistryClient::new(caller.clone(), reg.url());
        let caller = caller.clone();
        tasks.push(tokio::spawn(async move {
            let urls = reg
                .lookup_urls(SERVICE_NAME)
                .await
                .map_err(|e| BenchError::RegistryUnavailable(e.to_string()))?;
            if urls.is_empty() {
                return Err(BenchError::RegistryUnavailable(format!("no {SERVICE_NAME} instance registered")));
            }
            let mut acked = 0u64;
            let mut i = c;
            while Instant::now() < deadline {
                let m = LogMessage::new(format!("client-{c}"), "bench", Severity::Info, "entry");
                if caller.push(&urls[i % urls.len()], Kind::Publish, m).await.is_ok() {
                    acked += 1;
                }
                i += 1;
            }
            Ok(acked)
        }));
    }
    let mut acked = 0;
    let mut first_err = None;
    for t in tasks {
        match t.await.map_err(|e| BenchError::Setup(e.to_string()))? {
            Ok(n) => acked += n,
            Err(e) => first_err = first_err.or(Some(e)),
        }
    }
    let elapsed = start.elapsed();
    let handled: u64 = services.iter().map(|(s, _)| s.handled()).sum();
    for (_, s) in services {
        s.shutdown().await;
    }
    reg_server.shutdown().await;
    if let Some(e) = first_err {
        return Err(e);
    }
    if handled != acked {
        return Err(BenchError::ConservationViolation { stored: handled, acked });
    }
    Ok(acked as f64 / elapsed.as_secs_f64())
}

pub async fn bench_registry(b: &RegistryBench) -> Result<Vec<BenchResult>, BenchError> {
    if b.reps < MIN_REPS {
        return Err(BenchError::TooFewReps(b.reps));
    }
    let mut out = Vec::new();
    for &k in &b.ks {
        let params = Params {
            k: Some(k),
            clients: Some(b.clients),
            ..Params::default()
        };
        let mut result = BenchResult::new(EXPERIMENT, params, "msgs/s");
        for _ in 0..b.reps {
            result.samples.push(run_once(b, k).await?);
        }
        out.push(result);
    }
    Ok(out)
}
