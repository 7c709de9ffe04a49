use std::path::PathBuf;

use sgflow_core::SgError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("invalid config: {0}")]
    Invalid(String),

    #[error(transparent)]
    Core(#[from] SgError),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// Exit code: 2 for configuration problems, 3 for solver nonconvergence, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } | CliError::Invalid(_) => 2,
            CliError::Core(e) if e.is_nonconvergence() => 3,
            CliError::Core(e) if matches!(e.root(), SgError::ZeroMassRegion { .. }) => 3,
            _ => 1,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
