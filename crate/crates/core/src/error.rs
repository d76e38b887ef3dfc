use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Configuration, shape, or dimension mismatch.
    #[error("config: {0}")]
    Config(String),

    /// A numeric result is undefined (zero-norm vectors, singular matrices, non-finite activations).
    #[error("numerical: {0}")]
    Numerical(String),

    /// A training loss became non-finite.
    #[error("training diverged at step {step}: {term} = {value}")]
    Divergence {
        step: usize,
        term: &'static str,
        value: f64,
    },

    /// A file did not match the expected binary or text layout.
    #[error("format: {0}")]
    Format(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Config(_) => "config",
            Error::Numerical(_) => "numerical",
            Error::Divergence { .. } => "divergence",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
        }
    }
}
