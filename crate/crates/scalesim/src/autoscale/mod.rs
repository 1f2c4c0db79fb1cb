//! Two-tier autoscaling: a per-instance batch-size controller and a
//! cluster-level instance controller.

pub mod global;
pub mod local;
