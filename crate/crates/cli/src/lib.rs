//! Experiment commands behind the `wakejam` binary. Every command is a pure
//! function of its configuration and input files.

pub mod commands;
pub mod config;

pub use config::{ExperimentConfig, REPORT_DIR_ENV};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] wakejam::Error),
}

impl CliError {
    /// 0 success, 2 usage/config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => e.exit_code(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;
