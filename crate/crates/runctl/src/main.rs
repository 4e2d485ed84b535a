mod bench;
mod serve;

use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use rcms_client::{Caller, HttpTransport, JobClient, RegistryClient, SessionClient};
use rcms_core::job::{JobSpec, RestartPolicy};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "runctl", version, about = "Run control services and clients")]
struct Cli {
    /// Service registry used for discovery and announcements.
    #[arg(long, global = true, env = "RCMS_REGISTRY_URL")]
    registry: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the service registry.
    Registry(serve::RegistryArgs),
    /// Run the resource service.
    ResourceService(serve::ResourceArgs),
    /// Run a monitor (IMS) instance.
    Ims(serve::ImsArgs),
    /// Run the session manager.
    SessionManager(serve::SessionManagerArgs),
    /// Run the rule engine against a monitor instance.
    Solver(serve::SolverArgs),
    /// Run a job supervisor.
    Jobctl(serve::JobctlArgs),
    /// Run simulated nodes and register them.
    Simnodes(serve::SimnodeArgs),
    /// Open, command and close sessions.
    Session {
        #[command(subcommand)]
        cmd: SessionCmd,
        /// Session manager; looked up in the registry when absent.
        #[arg(long, global = true)]
        url: Option<String>,
    },
    /// Start, stop and inspect supervised jobs.
    Job {
        #[command(subcommand)]
        cmd: JobCmd,
        /// Job supervisor; looked up in the registry when absent.
        #[arg(long, global = true)]
        url: Option<String>,
    },
    /// Run a benchmark and write its CSV.
    Bench(bench::BenchArgs),
}

#[derive(Subcommand)]
enum SessionCmd {
    Open {
        #[arg(long)]
        partition: String,
        #[arg(long, default_value = "runctl")]
        user: String,
    },
    Control {
        #[arg(long, conflicts_with = "partition", required_unless_present = "partition")]
        session: Option<String>,
        /// Commands the session open on this partition.
        #[arg(long)]
        partition: Option<String>,
        #[arg(long)]
        verb: String,
    },
    Close {
        #[arg(long, conflicts_with = "partition", required_unless_present = "partition")]
        session: Option<String>,
        #[arg(long)]
        partition: Option<String>,
    },
    List,
    Describe {
        #[arg(long)]
        session: String,
    },
}

#[derive(Subcommand)]
enum JobCmd {
    Start {
        #[arg(long)]
        id: String,
        /// Restarts allowed after a failed attempt.
        #[arg(long)]
        restarts: Option<u32>,
        #[arg(required = true, last = true)]
        command: Vec<String>,
    },
    Stop {
        #[arg(long)]
        id: String,
        #[arg(long, default_value_t = 5000)]
        grace_ms: u64,
    },
    Status {
        #[arg(long)]
        id: String,
    },
    List,
}

pub fn caller() -> Caller {
    Caller::new(HttpTransport::shared(), "runctl")
}

pub fn registry_client(url: &Option<String>) -> Option<RegistryClient> {
    url.as_ref().map(|u| RegistryClient::new(caller(), u.clone()))
}

/// `explicit`, or the first instance of `service` in the registry.
pub async fn resolve(explicit: &Option<String>, registry: &Option<String>, service: &str) -> Result<String> {
    if let Some(u) = explicit {
        return Ok(u.clone());
    }
    let reg = registry_client(registry)
        .ok_or_else(|| anyhow!("no --url given and no registry configured (set RCMS_REGISTRY_URL)"))?;
    let urls = reg.lookup_urls(service).await.context("registry lookup")?;
    urls.into_iter()
        .next()
        .ok_or_else(|| anyhow!("no {service} instance registered"))
}

fn print<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

async fn session_id(client: &SessionClient, session: Option<String>, partition: Option<String>) -> Result<String> {
    if let Some(s) = session {
        return Ok(s);
    }
    let partition = partition.expect("clap requires one of the two");
    let open: Vec<_> = client
        .list()
        .await?
        .into_iter()
        .filter(|s| s.partition_id == partition)
        .collect();
    match open.as_slice() {
        [one] => Ok(one.id.clone()),
        [] => bail!("no open session on partition {partition}"),
        _ => bail!("several sessions on partition {partition}; pass --session"),
    }
}

async fn session(cmd: SessionCmd, url: String) -> Result<()> {
    let client = SessionClient::new(caller(), url);
    match cmd {
        SessionCmd::Open { partition, user } => print(&client.open(&partition, &user).await?),
        SessionCmd::Control {
            session,
            partition,
            verb,
        } => {
            let id = session_id(&client, session, partition).await?;
            let report = client.control(&id, &verb).await?;
            print(&report)?;
            if report.is_partial_failure() {
                bail!("partial failure");
            }
            Ok(())
        }
        SessionCmd::Close { session, partition } => {
            let id = session_id(&client, session, partition).await?;
            client.close(&id).await?;
            println!("closed {id}");
            Ok(())
        }
        SessionCmd::List => print(&client.list().await?),
        SessionCmd::Describe { session } => print(&client.describe(&session).await?),
    }
}

async fn job(cmd: JobCmd, url: String) -> Result<()> {
    let client = JobClient::new(caller(), url);
    match cmd {
        JobCmd::Start { id, restarts, command } => {
            let mut spec = JobSpec::new(id, command);
            if let Some(n) = restarts {
                spec = spec.restart(RestartPolicy::OnFailure { max_restarts: n });
            }
            print(&client.start(spec).await?)
        }
        JobCmd::Stop { id, grace_ms } => print(&client.stop(&id, Duration::from_millis(grace_ms)).await?),
        JobCmd::Status { id } => print(&client.status(&id).await?),
        JobCmd::List => print(&client.list().await?),
    }
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let reg = cli.registry;
    match cli.cmd {
        Cmd::Registry(a) => serve::registry(a).await,
        Cmd::ResourceService(a) => serve::resource(a, &reg).await,
        Cmd::Ims(a) => serve::ims(a, &reg).await,
        Cmd::SessionManager(a) => serve::session_manager(a, &reg).await,
        Cmd::Solver(a) => serve::solver(a, &reg).await,
        Cmd::Jobctl(a) => serve::jobctl(a, &reg).await,
        Cmd::Simnodes(a) => serve::simnodes(a, &reg).await,
        Cmd::Session { cmd, url } => session(cmd, resolve(&url, &reg, serve::SESSION).await?).await,
        Cmd::Job { cmd, url } => job(cmd, resolve(&url, &reg, serve::JOBCTL).await?).await,
        Cmd::Bench(a) => bench::run(a).await,
    }
}
