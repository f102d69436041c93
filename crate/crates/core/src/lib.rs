//! Deterministic simulation of shared-resource orchestration for real-time
//! containers on a Kubernetes-style cluster.

pub mod cli;
pub mod global;
pub mod model;
pub mod monitor;
pub mod node;
pub mod sim;
pub mod trace;
