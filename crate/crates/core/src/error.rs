use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("budget {budget} out of range (must be in 1..={max})")]
    BudgetOutOfRange { budget: usize, max: usize },

    #[error("index {0} has already been labeled")]
    AlreadyLabeled(usize),

    #[error("index {index} out of range for problem of size {n}")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("labeling budget exhausted")]
    BudgetExhausted,

    #[error("no unlabeled candidates remain")]
    NoCandidates,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("Cholesky factorization failed even with jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("rollout on {problem} failed at step {t}: {reason}")]
    Rollout { problem: String, t: usize, reason: String },

    #[error("unpaired results: {0}")]
    Unpaired(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
