use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violates an operation precondition (shapes, ranges, config values).
    #[error("rejected input: {0}")]
    Rejected(String),

    /// Matrix too close to singular for a trustworthy inverse or projector.
    #[error("singular or ill-conditioned matrix (estimated condition number {condition:e})")]
    Singular { condition: f64 },

    #[error("iterative method did not converge after {iterations} sweeps")]
    NoConvergence { iterations: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    /// Strict-mode training abort.
    #[error("invariant violated at step {step}: {detail}")]
    Invariant { step: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status for the command-line front end: 2 for bad input or
    /// I/O, 3 for a strict-mode abort, 1 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Rejected(_) | Error::Io { .. } | Error::Format { .. } | Error::Json(_) => 2,
            Error::Invariant { .. } => 3,
            Error::Singular { .. } | Error::NoConvergence { .. } | Error::NonFinite(_) => 1,
        }
    }

    pub(crate) fn rejected(msg: impl Into<String>) -> Self {
        Error::Rejected(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }
}
