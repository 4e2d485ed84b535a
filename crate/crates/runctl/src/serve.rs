//! Long-running service subcommands. Each serves until interrupted.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::Args;
use rcms_client::{Heartbeat, ImsClient, MessageSink, NullSink, ResourceClient};
use rcms_core::control::{ExpansionTable, Strategy};
use rcms_core::ims::{BackendKind, SharedStore};
use rcms_core::registry::ServiceRecord;
use rcms_core::solver::load_rules;
use rcms_service::fm::FmConfig;
use rcms_service::ims::{ImsConfig, ImsInstance};
use rcms_service::jobctl::Supervisor;
use rcms_service::registry::RegistryService;
use rcms_service::resource::ResourceService;
use rcms_service::server::ServerHandle;
use rcms_service::session::SessionManager;
use rcms_service::simnode::{register_nodes, spawn_nodes, NodeSpec};
use rcms_service::solver::SolverService;

use crate::{caller, registry_client, resolve};

pub const RESOURCE: &str = "resource";
pub const SESSION: &str = "session";
pub const JOBCTL: &str = "jobctl";
pub const SOLVER: &str = "solver";
pub const IMS: &str = rcms_service::ims::SERVICE_NAME;

const HEARTBEAT: Duration = Duration::from_secs(10);

#[derive(Args)]
pub struct RegistryArgs {
    #[arg(long, default_value = "127.0.0.1:7000")]
    listen: String,
    /// Seconds a record lives without a heartbeat.
    #[arg(long, default_value_t = 30)]
    ttl: u64,
}

#[derive(Args)]
pub struct ResourceArgs {
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    #[arg(long)]
    journal: Option<PathBuf>,
    /// Seconds between reachability scans; 0 disables them.
    #[arg(long, default_value_t = 0)]
    scan_period: u64,
}

#[derive(Args)]
pub struct ImsArgs {
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    #[arg(long, default_value = "memory")]
    backend: BackendKind,
    /// Store location for the file and db backends.
    #[arg(long, default_value = "ims.store")]
    path: PathBuf,
    /// Added to every statement on the db backend.
    #[arg(long, default_value_t = 0)]
    link_latency_ms: u64,
    #[arg(long, default_value = "ims-0")]
    id: String,
}

#[derive(Args)]
pub struct SessionManagerArgs {
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    /// Resource service; looked up in the registry when absent.
    #[arg(long)]
    resources: Option<String>,
    /// Command expansion table.
    #[arg(long)]
    expansion: Option<PathBuf>,
    #[arg(long, default_value = "bounded_parallel")]
    strategy: Strategy,
    #[arg(long, default_value_t = rcms_core::control::DEFAULT_WORKER_LIMIT)]
    worker_limit: usize,
}

#[derive(Args)]
pub struct SolverArgs {
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    #[arg(long)]
    rules: PathBuf,
    /// Monitor instance to subscribe to; looked up when absent.
    #[arg(long)]
    ims: Option<String>,
    /// Session manager receiving proposals; looked up when absent.
    #[arg(long)]
    session: Option<String>,
}

#[derive(Args)]
pub struct JobctlArgs {
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
}

#[derive(Args)]
pub struct SimnodeArgs {
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    delay_ms: u64,
    #[arg(long, default_value = "node")]
    prefix: String,
}

async fn announce(registry: &Option<String>, name: &str, id: &str, url: &str) -> Result<Option<Heartbeat>> {
    let Some(reg) = registry_client(registry) else {
        return Ok(None);
    };
    let hb = reg
        .heartbeat(ServiceRecord::new(name, id, url), HEARTBEAT)
        .await
        .with_context(|| format!("registering {name} with {}", reg.url()))?;
    Ok(Some(hb))
}

/// The monitor, when one is registered; otherwise log lines go nowhere.
async fn monitor_sink(registry: &Option<String>) -> Arc<dyn MessageSink> {
    if let Some(reg) = registry_client(registry) {
        if let Ok(ims) = ImsClient::discover(caller(), &reg).await {
            return Arc::new(ims);
        }
    }
    tracing::warn!("no monitor instance found; log messages are discarded");
    Arc::new(NullSink)
}

async fn serve_until_interrupted(name: &str, servers: Vec<ServerHandle>) -> Result<()> {
    for s in &servers {
        println!("{name} listening on {}", s.url());
    }
    tokio::signal::ctrl_c().await?;
    for s in servers {
        s.shutdown().await;
    }
    Ok(())
}

pub async fn registry(a: RegistryArgs) -> Result<()> {
    let svc = RegistryService::new(Duration::from_secs(a.ttl));
    let server = svc.spawn(&a.listen).await.context("bind")?;
    serve_until_interrupted("registry", vec![server]).await
}

pub async fn resource(a: ResourceArgs, reg: &Option<String>) -> Result<()> {
    let svc = match &a.journal {
        Some(p) => ResourceService::with_journal(caller(), p).with_context(|| format!("journal {}", p.display()))?,
        None => ResourceService::new(caller()),
    };
    let _scanner = (a.scan_period > 0).then(|| svc.spawn_scanner(Duration::from_secs(a.scan_period)));
    let server = svc.spawn(&a.listen).await.context("bind")?;
    let _hb = announce(reg, RESOURCE, "resource-0", &server.url()).await?;
    serve_until_interrupted("resource service", vec![server]).await
}

pub async fn ims(a: ImsArgs, reg: &Option<String>) -> Result<()> {
    let latency = Duration::from_millis(a.link_latency_ms);
    let store = match a.backend {
        BackendKind::Memory => SharedStore::memory(),
        BackendKind::File => SharedStore::file(&a.path)?,
        BackendKind::Db => SharedStore::db(&a.path, latency)?,
    };
    let ims = ImsInstance::new(a.id, store.connect()?, caller(), ImsConfig::default());
    let server = ims.spawn(&a.listen).await.context("bind")?;
    let _hb = match registry_client(reg) {
        Some(r) => Some(ims.register(&r, &server.url()).await?),
        None => None,
    };
    serve_until_interrupted("ims", vec![server]).await
}

pub async fn session_manager(a: SessionManagerArgs, reg: &Option<String>) -> Result<()> {
    let rs_url = resolve(&a.resources, reg, RESOURCE).await?;
    let table = match &a.expansion {
        Some(p) => ExpansionTable::load(p)?,
        None => ExpansionTable::default(),
    };
    let config = FmConfig {
        strategy: a.strategy,
        worker_limit: a.worker_limit,
        ..FmConfig::default()
    };
    let sm = SessionManager::new(
        caller(),
        ResourceClient::new(caller(), rs_url),
        monitor_sink(reg).await,
        table,
        config,
    );
    let server = sm.spawn(&a.listen).await.context("bind")?;
    let _hb = announce(reg, SESSION, "session-0", &server.url()).await?;
    let r = serve_until_interrupted("session manager", vec![server]).await;
    sm.shutdown().await;
    r
}

pub async fn solver(a: SolverArgs, reg: &Option<String>) -> Result<()> {
    let rules = load_rules(&a.rules)?;
    let ims_url = resolve(&a.ims, reg, IMS).await?;
    let session_url = match resolve(&a.session, reg, SESSION).await {
        Ok(u) => Some(u),
        Err(e) => {
            tracing::warn!("proposals stay local: {e}");
            None
        }
    };
    let ims = Arc::new(ImsClient::new(caller(), vec![ims_url.clone()]));
    let solver = SolverService::start(rules, caller(), ims.clone(), session_url)?;
    let server = solver.spawn(&a.listen).await.context("bind")?;
    match solver.subscribe(&ims, &ims_url, &server.url()).await? {
        Some(s) => tracing::info!(subscription = %s.subscription_id, "subscribed to {ims_url}"),
        None => tracing::warn!("empty ruleset; nothing to watch"),
    }
    let _hb = announce(reg, SOLVER, "solver-0", &server.url()).await?;
    serve_until_interrupted("solver", vec![server]).await
}

pub async fn jobctl(a: JobctlArgs, reg: &Option<String>) -> Result<()> {
    let sup = Supervisor::new(monitor_sink(reg).await);
    let server = sup.spawn(&a.listen).await.context("bind")?;
    let _hb = announce(reg, JOBCTL, "jobctl-0", &server.url()).await?;
    let r = serve_until_interrupted("jobctl", vec![server]).await;
    sup.shutdown(Duration::from_secs(5)).await;
    r
}

pub async fn simnodes(a: SimnodeArgs, reg: &Option<String>) -> Result<()> {
    let spec = NodeSpec {
        delay: Duration::from_millis(a.delay_ms),
        id_prefix: Some(a.prefix),
        ..NodeSpec::default()
    };
    let nodes = spawn_nodes(a.count, &spec).await.map_err(|e| anyhow::anyhow!("{}: {}", e.code, e.message))?;
    if let Some(r) = registry_client(reg) {
        register_nodes(&nodes, &r).await?;
    }
    for n in &nodes {
        println!("{} {}", n.id(), n.url());
    }
    tokio::signal::ctrl_c().await?;
    Ok(())
}
