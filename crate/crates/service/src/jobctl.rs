//! Job control: starts, stops and supervises local processes, forwarding
//! their output to the monitor service.

use std::collections::{BTreeMap, VecDeque};
use std::os::unix::process::ExitStatusExt;
use std::process::{ExitStatus, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use nix::errno::Errno;
use nix::sys::signal::{killpg, Signal};
use nix::unistd::Pid;
use parking_lot::Mutex;
use rcms_client::MessageSink;
use rcms_core::job::{JobError, JobSpec, JobState, JobStatus};
use rcms_core::model::{LogMessage, Severity};
use rcms_core::time::Timestamp;
use rcms_core::wire::*;
use tokio::io::{AsyncBufReadExt, AsyncRead, BufReader};
use tokio::process::{Child, Command};
use tokio::sync::{watch, Notify};
use tokio::task::JoinHandle;

use crate::server::{serve_handler, EnvelopeHandler, Reply, ServerHandle};

pub const DEFAULT_RESTART_BACKOFF: Duration = Duration::from_secs(1);
pub const DEFAULT_GRACE: Duration = Duration::from_secs(2);
/// Ended jobs kept for `status` and `list`.
pub const HISTORY: usize = 1000;
const NAME: &str = "jobctl";
/// How long captured output may trail the process exit.
const OUTPUT_DRAIN: Duration = Duration::from_secs(1);

struct Attempt {
    child: Child,
    readers: Vec<JoinHandle<()>>,
}

struct Job {
    spec: JobSpec,
    status: Mutex<JobStatus>,
    pgid: Mutex<Option<i32>>,
    stop_requested: AtomicBool,
    wake: Notify,
    done: watch::Receiver<bool>,
    /// Serializes stop requests for this job.
    control: tokio::sync::Mutex<()>,
}

#[derive(Default)]
struct Table {
    live: BTreeMap<String, Arc<Job>>,
    ended: VecDeque<JobStatus>,
}

pub struct Supervisor {
    sink: Arc<dyn MessageSink>,
    backoff: Duration,
    table: Mutex<Table>,
}

fn signal_group(pgid: i32, sig: Signal) {
    match killpg(Pid::from_raw(pgid), sig) {
        Ok(()) | Err(Errno::ESRCH) => {}
        Err(e) => tracing::warn!(pgid, "killpg {sig}: {e}"),
    }
}

impl Supervisor {
    pub fn new(sink: Arc<dyn MessageSink>) -> Arc<Self> {
        Self::with_backoff(sink, DEFAULT_RESTART_BACKOFF)
    }

    pub fn with_backoff(sink: Arc<dyn MessageSink>, backoff: Duration) -> Arc<Self> {
        Arc::new(Self {
            sink,
            backoff,
            table: Mutex::new(Table::default()),
        })
    }

    pub async fn spawn(self: &Arc<Self>, addr: &str) -> std::io::Result<ServerHandle> {
        serve_handler(Arc::new(JobService(self.clone())), addr).await
    }

    pub async fn start(self: &Arc<Self>, spec: JobSpec) -> Result<JobStatus, JobError> {
        spec.validate()?;
        let (done_tx, done_rx) = watch::channel(false);
        let job = Arc::new(Job {
            status: Mutex::new(JobStatus {
                id: spec.id.clone(),
                state: JobState::Starting,
                pid: None,
                attempts: 0,
                restarts_used: 0,
                started_at: None,
                ended_at: None,
            }),
            spec: spec.clone(),
            pgid: Mutex::new(None),
            stop_requested: AtomicBool::new(false),
            wake: Notify::new(),
            done: done_rx,
            control: tokio::sync::Mutex::new(()),
        });
        {
            let mut t = self.table.lock();
            if t.live.contains_key(&spec.id) {
                return Err(JobError::DuplicateJobId(spec.id));
            }
            t.live.insert(spec.id.clone(), job.clone());
        }
        let attempt = match self.launch(&job) {
            Ok(a) => a,
            Err(e) => {
                self.table.lock().live.remove(&spec.id);
                return Err(e);
            }
        };
        let snapshot = job.status.lock().clone();
        let this = self.clone();
        tokio::spawn(async move { this.supervise(job, attempt, done_tx).await });
        Ok(snapshot)
    }

    fn launch(&self, job: &Job) -> Result<Attempt, JobError> {
        let spec = &job.spec;
        let mut cmd = Command::new(&spec.command[0]);
        cmd.args(&spec.command[1..])
            .envs(&spec.env)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0)
            .kill_on_drop(true);
        if let Some(dir) = &spec.working_dir {
            cmd.current_dir(dir);
        }
        let mut child = cmd.spawn().map_err(|e| JobError::SpawnFailure {
            id: spec.id.clone(),
            reason: format!("{}: {e}", spec.command[0]),
        })?;
        let pid = child.id();
        *job.pgid.lock() = pid.map(|p| p as i32);
        {
            let mut st = job.status.lock();
            st.state = JobState::Running;
            st.pid = pid;
            st.attempts += 1;
            st.started_at = Some(Timestamp::now());
        }
        let mut readers = Vec::new();
        if let Some(out) = child.stdout.take() {
            readers.push(self.forward(out, &spec.log_source, "stdout", Severity::Info));
        }
        if let Some(err) = child.stderr.take() {
            readers.push(self.forward(err, &spec.log_source, "stderr", Severity::Warn));
        }
        Ok(Attempt { child, readers })
    }

    fn forward<R: AsyncRead + Unpin + Send + 'static>(
        &self,
        pipe: R,
        source: &str,
        msg_type: &'static str,
        sev: Severity,
    ) -> JoinHandle<()> {
        let sink = self.sink.clone();
        let source = source.to_string();
        tokio::spawn(async move {
            let mut lines = BufReader::new(pipe).lines();
            while let Ok(Some(line)) = lines.next_line().await {
                sink.publish(LogMessage::new(source.clone(), msg_type, sev, line)).await;
            }
        })
    }

    async fn supervise(self: Arc<Self>, job: Arc<Job>, mut attempt: Attempt, done: watch::Sender<bool>) {
        let max = job.spec.restart.max_restarts();
        let final_state = loop {
            let exit = attempt.child.wait().await;
            let pgid = job.pgid.lock().take();
            // Anything the job left behind in its group goes with it.
            if let Some(g) = pgid {
                signal_group(g, Signal::SIGKILL);
            }
            let stopped = job.stop_requested.load(Ordering::SeqCst);
            let state = match exit {
                Ok(status) => classify(status, stopped),
                Err(e) => {
                    tracing::warn!(job = %job.spec.id, "wait failed: {e}");
                    JobState::Failed { code: None, signal: None }
                }
            };
            let readers = std::mem::take(&mut attempt.readers);
            let _ = tokio::time::timeout(OUTPUT_DRAIN, futures::future::join_all(readers)).await;
            let restarts_used = job.status.lock().restarts_used;
            let retry = matches!(state, JobState::Failed { .. }) && !stopped && restarts_used < max;
            if !retry {
                break state;
            }
            job.status.lock().state = state;
            tokio::select! {
                _ = tokio::time::sleep(self.backoff) => {}
                _ = job.wake.notified() => {}
            }
            if job.stop_requested.load(Ordering::SeqCst) {
                break state;
            }
            job.status.lock().restarts_used += 1;
            match self.launch(&job) {
                Ok(a) => attempt = a,
                Err(e) => {
                    tracing::warn!(job = %job.spec.id, "restart failed: {e}");
                    break JobState::Failed { code: None, signal: None };
                }
            }
        };
        let snapshot = {
            let mut st = job.status.lock();
            st.state = final_state;
            st.ended_at = Some(Timestamp::now());
            st.clone()
        };
        {
            let mut t = self.table.lock();
            if t.live.get(&job.spec.id).is_some_and(|j| Arc::ptr_eq(j, &job)) {
                t.live.remove(&job.spec.id);
            }
            t.ended.push_back(snapshot);
            while t.ended.len() > HISTORY {
                t.ended.pop_front();
            }
        }
        let _ = done.send(true);
    }

    fn live(&self, id: &str) -> Option<Arc<Job>> {
        self.table.lock().live.get(id).cloned()
    }

    /// Sends SIGTERM to the job's process group, then SIGKILL once `grace`
    /// has passed.
    pub async fn stop(&self, id: &str, grace: Duration) -> Result<JobStatus, JobError> {
        let job = self.live(id).ok_or_else(|| JobError::UnknownJob(id.to_string()))?;
        let _serial = job.control.lock().await;
        job.stop_requested.store(true, Ordering::SeqCst);
        job.wake.notify_one();
        let pgid = *job.pgid.lock();
        if let Some(g) = pgid {
            signal_group(g, Signal::SIGTERM);
        }
        let mut done = job.done.clone();
        if tokio::time::timeout(grace, done.wait_for(|d| *d)).await.is_err() {
            if let Some(g) = *job.pgid.lock() {
                signal_group(g, Signal::SIGKILL);
            }
            let _ = done.wait_for(|d| *d).await;
        }
        let st = job.status.lock().clone();
        Ok(st)
    }

    /// Waits for the job to end, however that happens.
    pub async fn wait(&self, id: &str) -> Result<JobStatus, JobError> {
        let Some(job) = self.live(id) else {
            return self.status(id);
        };
        let mut done = job.done.clone();
        let _ = done.wait_for(|d| *d).await;
        let st = job.status.lock().clone();
        Ok(st)
    }

    pub fn status(&self, id: &str) -> Result<JobStatus, JobError> {
        let t = self.table.lock();
        if let Some(j) = t.live.get(id) {
            return Ok(j.status.lock().clone());
        }
        t.ended
            .iter()
            .rev()
            .find(|s| s.id == id)
            .cloned()
            .ok_or_else(|| JobError::UnknownJob(id.to_string()))
    }

    /// Live jobs, then ended ones oldest first.
    pub fn list(&self) -> Vec<JobStatus> {
        let t = self.table.lock();
        let mut out: Vec<JobStatus> = t.live.values().map(|j| j.status.lock().clone()).collect();
        out.extend(t.ended.iter().cloned());
        out
    }

    /// Stops every live job.
    pub async fn shutdown(&self, grace: Duration) {
        let ids: Vec<String> = self.table.lock().live.keys().cloned().collect();
        let stops = ids.iter().map(|id| self.stop(id, grace));
        futures::future::join_all(stops).await;
    }
}

fn classify(status: ExitStatus, stopped: bool) -> JobState {
    match (status.code(), status.signal()) {
        (Some(0), _) => JobState::Exited { code: 0 },
        (Some(code), _) if stopped => JobState::Exited { code },
        (Some(code), _) => JobState::Failed {
            code: Some(code),
            signal: None,
        },
        (None, _) if stopped => JobState::Killed,
        (None, signal) => JobState::Failed { code: None, signal },
    }
}

fn job_error(e: &JobError) -> ErrorBody {
    ErrorBody::new(e.code(), e.to_string())
}

/// The supervisor behind the envelope endpoint.
pub struct JobService(pub Arc<Supervisor>);

#[async_trait]
impl EnvelopeHandler for JobService {
    fn name(&self) -> String {
        NAME.into()
    }

    async fn handle(&self, env: Envelope) -> Reply {
        let sup = &self.0;
        let result = match (&env.kind, &env.body) {
            (Kind::Command, Body::StartJob(spec)) => sup.start(spec.clone()).await.map(Body::from),
            (Kind::Command, Body::StopJob(s)) => sup.stop(&s.id, Duration::from_millis(s.grace_ms)).await.map(Body::from),
            (Kind::Query, Body::JobStatusQuery(r)) => sup.status(&r.id).map(Body::from),
            (Kind::Query, Body::ListJobs(_)) => Ok(Jobs { jobs: sup.list() }.into()),
            (Kind::Command, Body::Shutdown(_)) => {
                sup.shutdown(DEFAULT_GRACE).await;
                return Reply::to(&env, NAME, Kind::Ack, Ack::default());
            }
            (Kind::Query, Body::Probe(_)) => Ok(ProbeOk { service: NAME.into() }.into()),
            _ => return Reply::unsupported(&env, NAME),
        };
        match result {
            Ok(body) => Reply::to(&env, NAME, Kind::Result, body),
            Err(e) => Reply::error(&env, NAME, job_error(&e)),
        }
    }
}
