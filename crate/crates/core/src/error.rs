use ndarray::Array2;
use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("kernel factorization failed after jitter ladder {attempted:?}")]
    Factorization { attempted: Vec<f64> },

    /// A particle left the finite reals. `last_good` holds the ensemble as it
    /// was before the failing step.
    #[error("divergence at iteration {iteration}: particle {particle} became non-finite")]
    Divergence {
        iteration: usize,
        particle: usize,
        last_good: Box<Array2<f64>>,
    },

    #[error("degenerate chain: {0}")]
    DegenerateChain(String),

    #[error("non-finite objective at outer iteration {iteration}")]
    NonFiniteLoss { iteration: usize, trace: Vec<f64> },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
