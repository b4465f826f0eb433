use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on shapes, ranges or settings was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("integration produced a non-finite state at step {step}")]
    NonFinite { step: usize },

    #[error("no prediction score is finite; cannot select bias endpoints")]
    NoFiniteScore,

    #[error("ensemble stuck: post burn-in acceptance rate {rate:.4} is below {threshold}")]
    StuckEnsemble { rate: f64, threshold: f64 },

    #[error("total importance weight is zero")]
    ZeroWeight,

    #[error("every optimization in the annealing run failed")]
    AllOptimizationsFailed,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("missing artifact {0}; run the earlier stage first")]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
