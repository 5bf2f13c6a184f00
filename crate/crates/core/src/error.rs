use thiserror::Error;

use crate::trainer::RunMetrics;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Centered features are identically zero, so the unit-norm scale is undefined.
    #[error("feature normalization undefined: centered feature matrix is zero")]
    ScaleUndefined,

    /// A cached forward pass no longer matches the inputs handed to backward.
    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// Non-finite gradient or runaway objective during gradient steps.
    #[error("diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },

    /// Matrix balancing produced non-finite scalings or an increasing dual.
    #[error("matrix balancing diverged after {rounds} rounds (mu = {mu}): {reason}")]
    BalanceDiverged { rounds: usize, mu: f64, reason: String },

    #[error("training aborted: {reason}")]
    Aborted {
        reason: String,
        partial: Box<RunMetrics>,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("refused: {0}")]
    Refused(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for failures caused by the numerics rather than by the caller.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. }
                | Error::BalanceDiverged { .. }
                | Error::Aborted { .. }
                | Error::ScaleUndefined
        )
    }
}
