//! Experiment driver for flowlab: config parsing, the `train`, `field`,
//! `sample` and `profile` subcommands, and every file they write.

pub mod commands;
pub mod config;
pub mod export;
pub mod metrics;
pub mod schema;

use flowlab::FlowError;
use thiserror::Error;

pub use commands::{Options, Source};
pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    /// 2 for config or input problems, 3 for numerical or runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::InvalidParameter(_)
            | FlowError::DimensionMismatch { .. }
            | FlowError::Unsupported(_)
            | FlowError::Checkpoint(_) => CliError::Input(e.to_string()),
            FlowError::Domain { .. }
            | FlowError::Singularity { .. }
            | FlowError::NonFinite(_)
            | FlowError::Training { .. }
            | FlowError::Integration { .. }
            | FlowError::Io(_) => CliError::Runtime(e.to_string()),
        }
    }
}
