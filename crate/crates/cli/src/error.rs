use std::process::ExitCode;

use precoding_gnn::Error as CoreError;
use thiserror::Error;

/// Failure of a CLI run, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, unreadable or inconsistent configuration, incompatible artifacts.
    #[error("{0}")]
    Usage(String),
    /// The numerics diverged or hit a degenerate input.
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(2),
            CliError::Numeric(_) => ExitCode::from(3),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Numeric { .. } | CoreError::Singular { .. } | CoreError::Degenerate(_) | CoreError::Internal(_) => {
                CliError::Numeric(e.to_string())
            }
            CoreError::InvalidArgument(_) | CoreError::Format { .. } | CoreError::Io(_) => CliError::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub type CliResult<T> = Result<T, CliError>;
