use thiserror::Error;

use crate::optimizer::Checkpoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("non-finite latent state for observation {obs}")]
    NonFiniteLatent { obs: usize },

    #[error("singular latent covariance: Cholesky diagonal entry {index} is {value:e}")]
    SingularCovariance { index: usize, value: f64 },

    #[error("degenerate Cholesky row {row}: norm {norm:e} cannot be normalised")]
    DegenerateCholeskyRow { row: usize, norm: f64 },

    /// Numerical blow-up during a run. Carries the last checkpoint whose
    /// parameters were all finite, when one exists.
    #[error("numerical divergence: {message}")]
    Divergence {
        message: String,
        last_checkpoint: Option<Box<Checkpoint>>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn diverged(msg: impl Into<String>) -> Self {
        Error::Divergence {
            message: msg.into(),
            last_checkpoint: None,
        }
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. })
    }
}
