use thiserror::Error;

/// Errors raised by the precoding workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Gram matrix too ill-conditioned to invert; carries the condition estimate.
    #[error("singular matrix (condition estimate {condition:.3e})")]
    Singular { condition: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("non-finite value in sample {sample}: {message}")]
    Numeric { sample: usize, message: String },

    /// An algorithmic invariant was violated; indicates a bug rather than bad input.
    #[error("internal consistency check failed: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
