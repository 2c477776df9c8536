//! Error types shared across the toolkit.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value is outside its documented domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An internal shape or geometry contract was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A manifest or config file failed to parse.
    #[error("parse error in {path} at line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    /// Not enough samples to satisfy a sampling request.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A protocol relabeling left one side of the task empty.
    #[error("degenerate protocol: {0}")]
    DegenerateProtocol(String),

    /// A checkpoint cannot be loaded against the current configuration.
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    /// Both classes are required to compute ranking metrics.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Failure while writing an output artifact.
    #[error("persistence error: {0}")]
    Persistence(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable category tag used by the CLI for error reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::Contract(_) => "contract",
            Error::Numeric(_) => "numeric",
            Error::Parse { .. } => "parse",
            Error::InsufficientData(_) => "insufficient-data",
            Error::DegenerateProtocol(_) => "degenerate-protocol",
            Error::IncompatibleCheckpoint(_) => "incompatible-checkpoint",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::Persistence(_) => "persistence",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
