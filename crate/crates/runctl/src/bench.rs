use std::fs::File;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Subcommand};
use rcms_bench::fanout::{bench_fanout, FanoutBench};
use rcms_bench::ims::{bench_ims, ImsBench, Point};
use rcms_bench::registry::{bench_registry, RegistryBench};
use rcms_bench::report::{gnuplot_script, write_csv};
use rcms_bench::{BenchResult, MIN_REPS};
use rcms_core::control::Strategy;
use rcms_core::ims::BackendKind;

#[derive(Args)]
pub struct BenchArgs {
    #[command(subcommand)]
    which: Which,
    /// CSV output.
    #[arg(long, global = true, default_value = "results.csv")]
    out: PathBuf,
    /// Also write a gnuplot script next to the CSV.
    #[arg(long, global = true)]
    gnuplot: bool,
    #[arg(long, global = true, default_value_t = MIN_REPS)]
    reps: usize,
}

#[derive(Subcommand)]
enum Which {
    /// Time one state transition across N simulated nodes.
    Fanout {
        #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,50,60,70,80,90,100,110,120")]
        nodes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "sequential,bounded_parallel,hierarchical")]
        strategies: Vec<Strategy>,
        /// Work per command on each node.
        #[arg(long, default_value_t = 10)]
        delay_ms: u64,
        #[arg(long, default_value_t = rcms_core::control::DEFAULT_WORKER_LIMIT)]
        worker_limit: usize,
        /// Intermediate managers in the hierarchical tree; ceil(sqrt(N)) by default.
        #[arg(long)]
        branching: Option<usize>,
    },
    /// Monitor throughput.
    Ims {
        #[arg(long, default_value = "scaling")]
        experiment: ImsExperiment,
        /// Instance counts; overrides the experiment default.
        #[arg(long, value_delimiter = ',')]
        instances: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        publishers: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        subscribers: Option<Vec<usize>>,
        #[arg(long, default_value_t = 1000)]
        duration_ms: u64,
        #[arg(long)]
        backend: Option<BackendKind>,
        #[arg(long, default_value_t = 4)]
        link_latency_ms: u64,
    },
    /// Log service throughput with instances found through the registry.
    Registry {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        instances: Vec<usize>,
        #[arg(long, default_value_t = 15)]
        clients: usize,
        #[arg(long, default_value_t = 5)]
        service_time_ms: u64,
        #[arg(long, default_value_t = 1000)]
        duration_ms: u64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ImsExperiment {
    /// 16 publishers, 1..4 instances on the db store.
    Scaling,
    /// One instance, 1..64 publishers.
    Publishers,
    /// One instance in memory, 0 and 8 subscribers.
    Subscribers,
}

fn ims_bench(
    experiment: ImsExperiment,
    instances: Option<Vec<usize>>,
    publishers: Option<Vec<usize>>,
    subscribers: Option<Vec<usize>>,
) -> ImsBench {
    let mut b = match experiment {
        ImsExperiment::Scaling => ImsBench::scaling(),
        ImsExperiment::Publishers => ImsBench::publishers(),
        ImsExperiment::Subscribers => ImsBench::subscribers(),
    };
    if instances.is_some() || publishers.is_some() || subscribers.is_some() {
        let pick = |v: Option<Vec<usize>>, f: fn(&Point) -> usize| {
            v.unwrap_or_else(|| {
                let mut d: Vec<usize> = b.points.iter().map(f).collect();
                d.dedup();
                d
            })
        };
        let ks = pick(instances, |p| p.k);
        let ps = pick(publishers, |p| p.p);
        let ss = pick(subscribers, |p| p.s);
        let mut points = Vec::new();
        for &k in &ks {
            for &p in &ps {
                for &s in &ss {
                    points.push(Point { k, p, s });
                }
            }
        }
        b.points = points;
    }
    b
}

fn summary(results: &[BenchResult]) {
    for r in results {
        let p = &r.params;
        let label: Vec<String> = [
            p.n.map(|v| format!("n={v}")),
            p.strategy.map(|v| format!("strategy={v}")),
            p.k.map(|v| format!("k={v}")),
            p.p.map(|v| format!("p={v}")),
            p.s.map(|v| format!("s={v}")),
            p.clients.map(|v| format!("clients={v}")),
        ]
        .into_iter()
        .flatten()
        .collect();
        println!(
            "{} {}: median {:.1} {} p90 {:.1} ({} samples, {} failed)",
            r.experiment,
            label.join(" "),
            r.median(),
            r.unit,
            r.p90(),
            r.samples.len(),
            r.failed
        );
    }
}

pub async fn run(a: BenchArgs) -> Result<()> {
    let results = match a.which {
        Which::Fanout {
            nodes,
            strategies,
            delay_ms,
            worker_limit,
            branching,
        } => {
            bench_fanout(&FanoutBench {
                ns: nodes,
                strategies,
                reps: a.reps,
                delay: Duration::from_millis(delay_ms),
                worker_limit,
                branching,
            })
            .await?
        }
        Which::Ims {
            experiment,
            instances,
            publishers,
            subscribers,
            duration_ms,
            backend,
            link_latency_ms,
        } => {
            let mut b = ims_bench(experiment, instances, publishers, subscribers);
            b.duration = Duration::from_millis(duration_ms);
            b.reps = a.reps;
            b.link_latency = Duration::from_millis(link_latency_ms);
            if let Some(k) = backend {
                b.backend = k;
            }
            bench_ims(&b).await?
        }
        Which::Registry {
            instances,
            clients,
            service_time_ms,
            duration_ms,
        } => {
            bench_registry(&RegistryBench {
                ks: instances,
                clients,
                service_time: Duration::from_millis(service_time_ms),
                duration: Duration::from_millis(duration_ms),
                reps: a.reps,
            })
            .await?
        }
    };
    summary(&results);
    let file = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_csv(file, &results)?;
    println!("wrote {}", a.out.display());
    if a.gnuplot {
        let gp = a.out.with_extension("gp");
        std::fs::write(&gp, gnuplot_script(&a.out, &results))?;
        println!("wrote {}", gp.display());
    }
    Ok(())
}
