//! Experiment runner for the echo sampler: loads TOML configs, runs seeded
//! batches of sampler runs, and writes traces, metrics and comparison tables.

pub mod commands;
pub mod config;
pub mod trace_io;

pub use commands::{cmd_calibrate, cmd_compare, cmd_run, Calibration, MetricsRow, Overrides};
pub use config::{ConfigError, ExperimentConfig};
