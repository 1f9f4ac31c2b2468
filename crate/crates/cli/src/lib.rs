//! Experiment runner: declarative configs, initial data, drivers and
//! CSV artifacts on top of `savflow-core`.

pub mod config;
pub mod experiments;
pub mod initial;
pub mod output;

pub use config::{ConfigError, ExperimentConfig, ExperimentKind};
pub use experiments::{rates_from_ledgers, run_experiment, Outcome};
