pub mod cli;
pub mod cluster;
pub mod config;
pub mod cost;
pub mod metrics;
pub mod orchestrator;
pub mod presets;
pub mod sim;
pub mod topology;
pub mod workload;
