pub mod autoscale;
pub mod cli;
pub mod config;
pub mod engine;
pub mod metrics;
pub mod output;
pub mod error;
pub mod perfmodel;
pub mod workload;
