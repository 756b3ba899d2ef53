use std::path::PathBuf;

use crate::types::Query;

/// Failures reported by generation backends.
#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("server returned status {status} after {attempts} attempt(s): {body}")]
    Status {
        attempts: u32,
        status: u16,
        body: String,
    },
    #[error("malformed server response: {0}")]
    Decode(String),
    #[error("backend cannot serve this prompt: {0}")]
    Unsupported(String),
}

impl GenError {
    /// Transport failures and non-2xx responses may succeed on a retry.
    pub fn is_retriable(&self) -> bool {
        matches!(self, GenError::Transport { .. } | GenError::Status { .. })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] GenError),
    #[error("{stage} diverged; last finite loss {last_finite_loss:?}")]
    Divergence {
        stage: &'static str,
        last_finite_loss: Option<f64>,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("attempt budget of {attempts} generations exhausted with {} accepted queries", accepted.len())]
    BudgetExhausted {
        attempts: usize,
        accepted: Vec<Query>,
    },
    #[error("stage `{stage}` precondition failed: {message}")]
    Precondition { stage: String, message: String },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
