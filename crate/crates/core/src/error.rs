use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or precondition.
    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("numeric input error: {0}")]
    NumericInput(String),

    #[error("index {index} out of range [{lo}, {hi}]")]
    Index { index: usize, lo: usize, hi: usize },

    /// Rejection sampling for obstacle placement gave up.
    #[error("obstacle placement failed after {attempts} attempts")]
    PlacementFailure { attempts: usize },

    /// Training produced a non-finite loss.
    #[error("non-finite loss at epoch {epoch}, step {step} (lr {learning_rate}): {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        learning_rate: f64,
        detail: String,
    },

    /// File format version or magic mismatch, truncation, or header mismatch.
    #[error("incompatible file {path}: {reason}")]
    Incompatible { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn incompatible(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Incompatible {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape { .. } => "shape",
            Error::NumericInput(_) => "numeric",
            Error::Index { .. } => "index",
            Error::PlacementFailure { .. } => "placement",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Incompatible { .. } => "incompatible",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }
}
