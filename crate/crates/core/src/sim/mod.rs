//! Deterministic simulation: scenarios, demand, the tick loop and metrics.

pub mod corpus;
pub mod demand;
pub mod engine;
pub mod metrics;
pub mod rng;
pub mod scenario;

pub use engine::{run, run_with, RunOptions, World};
pub use metrics::{compute_metrics, MetricsSummary};
pub use scenario::{load_scenario, LoadError, Scenario, ValidationError};
