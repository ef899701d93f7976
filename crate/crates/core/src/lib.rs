//! Deterministic discrete-event simulator of a rack-scale computer whose
//! top-of-rack switch schedules requests across servers that each run a
//! preemptive intra-server scheduler.

pub mod analysis;
pub mod baselines;
pub mod config;
pub mod experiment;
pub mod rack;
pub mod server;
pub mod sim;
pub mod switch;
pub mod workload;
