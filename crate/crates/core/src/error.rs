use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = KcsrError> = std::result::Result<T, E>;

/// Errors raised by the segmentation library.
///
/// The variants map onto the CLI exit codes: input problems (1), numerical
/// failures (2) and resource refusals (3). I/O failures count as input errors.
#[derive(Debug, Error)]
pub enum KcsrError {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// The optimizer produced a non-finite objective, gradient or update.
    #[error("optimizer diverged at iteration {iteration}: {detail}")]
    Diverged {
        iteration: usize,
        detail: String,
        last_gamma: Vec<f64>,
    },

    #[error("resource limit: {0}")]
    Resource(String),

    /// A broken internal invariant, e.g. a segment label outside `[1, k]`.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl KcsrError {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Self::Input(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Self::Numerical(msg.into())
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Input(_) | Self::Io { .. } | Self::Parse { .. } | Self::Json(_) => 1,
            Self::Numerical(_) | Self::Diverged { .. } | Self::Internal(_) => 2,
            Self::Resource(_) => 3,
        }
    }
}
