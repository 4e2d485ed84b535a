//! Shared model and service logic for the run-control and monitoring
//! framework. Everything here is transport-free; the HTTP services and
//! clients live in sibling crates.

pub mod control;
pub mod fsm;
pub mod ims;
pub mod job;
pub mod journal;
pub mod model;
pub mod partition;
pub mod registry;
pub mod resource;
pub mod solver;
pub mod stats;
pub mod time;
pub mod wire;

pub use time::Timestamp;
