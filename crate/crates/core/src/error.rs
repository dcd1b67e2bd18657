use thiserror::Error;

/// Errors produced by the self-labelling library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("NaN at row {row}, column {col}")]
    NotANumber { row: usize, col: usize },
    #[error("non-finite value {value} at row {row}, column {col}")]
    NonFinite { row: usize, col: usize, value: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("infeasible marginals: {0}")]
    Infeasible(String),
    #[error("instance too large: {0}")]
    TooLarge(String),
    #[error("non-finite scaling coefficient after {iteration} iterations (lambda too large for the cost range)")]
    NonFiniteDual { iteration: usize },
    #[error("malformed input: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
