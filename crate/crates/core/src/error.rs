use std::path::PathBuf;

use thiserror::Error;

/// Coarse failure class. Maps one-to-one onto CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numerical,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numerical => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("line {line}: duplicate observation for annotator {annotator:?}, item {item:?}")]
    Conflict {
        line: u64,
        annotator: String,
        item: String,
    },

    #[error("{0}")]
    Domain(String),

    #[error("no observations")]
    NoObservations,

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("objective diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("cholesky factorization failed after jitter escalation ({context})")]
    Cholesky { context: String },

    #[error("no viable shades: every cluster has fewer than {min_size} members")]
    NoViableShades { min_size: usize },

    #[error("unknown attribute {0:?}")]
    MissingAttribute(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("model file: {0}")]
    Format(String),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Io { .. } => ErrorCategory::Config,
            Error::Divergence { .. } | Error::Cholesky { .. } => ErrorCategory::Numerical,
            _ => ErrorCategory::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
