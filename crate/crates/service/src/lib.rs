//! The run control services: registry, resource service, session manager
//! and function managers, monitor service, job control and the solver.

pub mod fm;
pub mod ims;
pub mod jobctl;
pub mod logsvc;
pub mod registry;
pub mod resource;
pub mod server;
pub mod session;
pub mod simnode;
pub mod solver;
