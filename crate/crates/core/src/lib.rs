//! Deterministic desk-scale simulator of federated continual learning.
//!
//! A frozen random backbone is shared by all tasks; each task owns a small
//! adapter (gated linear skip proxies and a classifier head). Clients train
//! adapters locally, the server aggregates per-task deltas and applies a
//! FedOpt step, and every round the server model is evaluated on every task.

pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod runner;
pub mod schedule;
pub mod svg;

pub use config::{load_config, ExperimentConfig};
pub use error::{Error, Result};
pub use runner::{run_experiment, simulate, sweep, RunResult, Simulation};
