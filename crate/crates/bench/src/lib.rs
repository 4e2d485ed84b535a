//! Benchmark harness over simulated nodes: command fan-out, monitor
//! throughput and registry load balancing, reported as CSV.

pub mod fanout;
pub mod ims;
pub mod registry;
pub mod report;

pub use report::{BenchError, BenchResult, Params};

/// Repetitions per data point unless a caller asks for more.
pub const MIN_REPS: usize = 5;
