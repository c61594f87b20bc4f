//! Command implementations behind the `serpent` binary.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{Preset, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] serpent_core::Error),
    #[error(transparent)]
    Data(#[from] serpent_data::DataError),
    #[error(transparent)]
    Metrics(#[from] serpent_metrics::MetricsError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("gradient check failed for: {}", .0.join(", "))]
    GradCheck(Vec<String>),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// 1 for usage errors, 2 for data and file errors, 3 for numerical
    /// failures.
    pub fn exit_code(&self) -> i32 {
        use serpent_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Config(_)) => 1,
            CliError::GradCheck(_) | CliError::Core(E::NonFiniteLoss { .. } | E::NonFiniteGradient(_)) => 3,
            _ => 2,
        }
    }
}
