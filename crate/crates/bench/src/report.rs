use std::io::Write;
use std::path::Path;

use rcms_core::control::Strategy;
use rcms_core::stats::{median, percentile};
use thiserror::Error;

use crate::MIN_REPS;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BenchError {
    #[error("port exhaustion: {0}")]
    PortExhaustion(String),
    #[error("registry unavailable: {0}")]
    RegistryUnavailable(String),
    #[error("conservation violated: {stored} stored, {acked} acked")]
    ConservationViolation { stored: u64, acked: u64 },
    #[error("at least {MIN_REPS} repetitions are required, got {0}")]
    TooFewReps(usize),
    #[error("{0}")]
    Setup(String),
}

/// The parameters of one data point. Unused ones stay `None`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Params {
    pub n: Option<usize>,
    pub strategy: Option<Strategy>,
    pub k: Option<usize>,
    pub p: Option<usize>,
    pub s: Option<usize>,
    pub clients: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub experiment: String,
    pub params: Params,
    pub samples: Vec<f64>,
    /// Samples thrown away because the run was not functionally correct.
    pub failed: usize,
    pub unit: &'static str,
}

impl BenchResult {
    pub fn new(experiment: &str, params: Params, unit: &'static str) -> Self {
        Self {
            experiment: experiment.to_string(),
            params,
            samples: Vec::new(),
            failed: 0,
            unit,
        }
    }

    pub fn median(&self) -> f64 {
        median(&self.samples).unwrap_or(f64::NAN)
    }

    pub fn p90(&self) -> f64 {
        percentile(&self.samples, 90.0).unwrap_or(f64::NAN)
    }
}

pub const HEADER: [&str; 12] = [
    "experiment", "n", "strategy", "k", "p", "s", "clients", "reps", "failed", "median", "p90", "unit",
];

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

pub fn write_csv<W: Write>(out: W, results: &[BenchResult]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for r in results {
        let p = &r.params;
        w.write_record([
            r.experiment.clone(),
            opt(&p.n),
            opt(&p.strategy),
            opt(&p.k),
            opt(&p.p),
            opt(&p.s),
            opt(&p.clients),
            r.samples.len().to_string(),
            r.failed.to_string(),
            format!("{:.3}", r.median()),
            format!("{:.3}", r.p90()),
            r.unit.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// A gnuplot script plotting the median column of `csv_path` against the
/// experiment's x axis, one line per series.
pub fn gnuplot_script(csv_path: &Path, results: &[BenchResult]) -> String {
    let Some(first) = results.first() else {
        return String::new();
    };
    let (xcol, xlabel, series_col) = match first.experiment.as_str() {
        "fanout" => (2, "nodes", Some(3)),
        "ims_scaling" | "registry" => (4, "instances", None),
        "ims_publishers" => (5, "publishers", None),
        "ims_subscribers" => (6, "subscribers", None),
        _ => (2, "n", None),
    };
    let file = csv_path.display();
    let mut s = format!(
        "set datafile separator ','\nset key autotitle columnhead\nset xlabel '{xlabel}'\nset ylabel '{}'\nset grid\n",
        first.unit
    );
    s.push_str(&format!("set terminal pngcairo size 800,500\nset output '{file}.png'\n"));
    match series_col {
        Some(col) => {
            let mut names: Vec<String> = Vec::new();
            for r in results {
                let n = opt(&r.params.strategy);
                if !names.contains(&n) {
                    names.push(n);
                }
            }
            let lines: Vec<String> = names
                .iter()
                .map(|n| {
                    format!("'{file}' using {xcol}:(strcol({col}) eq '{n}' ? $10 : 1/0) with linespoints title '{n}'")
                })
                .collect();
            s.push_str(&format!("plot {}\n", lines.join(", \\\n     ")));
        }
        None => s.push_str(&format!(
            "plot '{file}' using {xcol}:10 with linespoints title '{}'\n",
            first.experiment
        )),
    }
    s
}
