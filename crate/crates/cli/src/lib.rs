//! Command implementations behind the `flocora` binary.

pub mod config;
pub mod run;
pub mod tools;

pub use config::{exit_code, ConfigError, DatasetConfig, ExperimentConfig, DATA_ROOT_ENV};
pub use run::{run, MetricsRow, RunOptions, Summary};
