use std::io::{BufRead, BufReader};
use std::process::{Child, ChildStdout, Command, Output, Stdio};

use rcms_client::{Caller, HttpTransport, ResourceClient};
use rcms_core::model::{Partition, Resource, ResourceKind};

const BIN: &str = env!("CARGO_BIN_EXE_runctl");

/// A background `runctl` process, killed on drop.
struct Daemon {
    child: Child,
    out: BufReader<ChildStdout>,
}

impl Daemon {
    fn start(args: &[&str], registry: Option<&str>) -> Daemon {
        let mut cmd = Command::new(BIN);
        cmd.args(args).stdout(Stdio::piped()).stderr(Stdio::null());
        match registry {
            Some(r) => cmd.env("RCMS_REGISTRY_URL", r),
            None => cmd.env_remove("RCMS_REGISTRY_URL"),
        };
        let mut child = cmd.spawn().expect("spawn runctl");
        let out = BufReader::new(child.stdout.take().unwrap());
        Daemon { child, out }
    }

    fn line(&mut self) -> String {
        let mut s = String::new();
        self.out.read_line(&mut s).expect("read");
        assert!(!s.is_empty(), "daemon exited early");
        s.trim_end().to_string()
    }

    /// The URL from its "... listening on URL" line.
    fn url(&mut self) -> String {
        let l = self.line();
        l.rsplit(' ').next().unwrap().to_string()
    }
}

impl Drop for Daemon {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn run(args: &[&str], registry: &str) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RCMS_REGISTRY_URL", registry)
        .output()
        .expect("run runctl")
}

fn stdout_ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_str(&stdout_ok(o)).expect("json output")
}

#[test]
fn bench_writes_csv_and_plot_script() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("reg.csv");
    let o = Command::new(BIN)
        .args(["bench", "registry", "--instances", "1,2", "--duration-ms", "100", "--gnuplot", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    stdout_ok(&o);
    let csv = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "experiment,n,strategy,k,p,s,clients,reps,failed,median,p90,unit");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("registry,,,1,,,15,5,0,"));
    let gp = std::fs::read_to_string(out.with_extension("gp")).unwrap();
    assert!(gp.contains("using 4:10"));
}

#[test]
fn bench_fanout_records_each_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fan.csv");
    let o = Command::new(BIN)
        .args(["bench", "fanout", "--nodes", "4", "--delay-ms", "1", "--branching", "2", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    stdout_ok(&o);
    let csv = std::fs::read_to_string(&out).unwrap();
    let strategies: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(strategies, ["sequential", "bounded_parallel", "hierarchical"]);
}

#[test]
fn too_few_reps_is_an_error() {
    let o = Command::new(BIN)
        .args(["bench", "registry", "--reps", "2", "--out", "/dev/null"])
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("at least 5"));
}

#[test]
fn jobs_through_the_registry() {
    let mut reg = Daemon::start(&["registry", "--listen", "127.0.0.1:0"], None);
    let reg_url = reg.url();
    let mut jobctl = Daemon::start(&["jobctl"], Some(&reg_url));
    jobctl.url();

    let st = json(&run(&["job", "start", "--id", "napper", "--", "sleep", "30"], &reg_url));
    assert_eq!(st["id"], "napper");
    let st = json(&run(&["job", "status", "--id", "napper"], &reg_url));
    assert_eq!(st["attempts"], 1);
    let all = json(&run(&["job", "list"], &reg_url));
    assert_eq!(all.as_array().unwrap().len(), 1);
    let st = json(&run(&["job", "stop", "--id", "napper", "--grace-ms", "500"], &reg_url));
    assert_ne!(st["state"], "running", "{st}");

    let o = run(&["job", "status", "--id", "ghost"], &reg_url);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("UnknownJob"));
}

#[test]
fn session_lifecycle_by_partition() {
    let mut reg = Daemon::start(&["registry", "--listen", "127.0.0.1:0"], None);
    let reg_url = reg.url();
    let mut rs = Daemon::start(&["resource-service"], Some(&reg_url));
    let rs_url = rs.url();
    let mut sm = Daemon::start(&["session-manager"], Some(&reg_url));
    sm.url();
    let mut nodes = Daemon::start(&["simnodes", "--count", "3", "--prefix", "cli"], Some(&reg_url));
    let node_lines: Vec<String> = (0..3).map(|_| nodes.line()).collect();

    let rt = tokio::runtime::Runtime::new().unwrap();
    rt.block_on(async {
        let rs = ResourceClient::new(Caller::new(HttpTransport::shared(), "test"), rs_url);
        let mut ids = Vec::new();
        for l in &node_lines {
            let (id, url) = l.split_once(' ').unwrap();
            let r = Resource::new(id, ResourceKind::Software, url).with_attribute("role", "readout");
            rs.register_resource(r.exclusive(true)).await.unwrap();
            ids.push(id.to_string());
        }
        rs.define_partition(Partition::new("cli-p", ids)).await.unwrap();
    });

    let s = json(&run(&["session", "open", "--partition", "cli-p"], &reg_url));
    assert_eq!(s["partition_id"], "cli-p");
    for verb in ["initialize", "configure", "start"] {
        let r = json(&run(&["session", "control", "--partition", "cli-p", "--verb", verb], &reg_url));
        assert_eq!(r["failed"].as_array().map_or(0, Vec::len), 0, "{verb}: {r}");
    }
    let listed = json(&run(&["session", "list"], &reg_url));
    assert_eq!(listed[0]["state"], "Running");
    let o = run(&["session", "control", "--partition", "cli-p", "--verb", "resume"], &reg_url);
    assert!(!o.status.success(), "resume from running must fail");
    stdout_ok(&run(&["session", "close", "--partition", "cli-p"], &reg_url));
    assert_eq!(json(&run(&["session", "list"], &reg_url)), serde_json::json!([]));
}
