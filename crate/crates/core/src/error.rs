use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: String,
        expected: String,
        found: String,
    },

    #[error("{name} is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { name: String, min_eigenvalue: f64 },

    #[error("measurement noise variance at t={index} must be positive, got {value}")]
    NonPositiveVariance { index: usize, value: f64 },

    #[error("{name} is not positive definite")]
    NotPositiveDefinite { name: String },

    #[error("lifted matrix dimension {size} exceeds the materialization cap {cap}")]
    TooLarge { size: usize, cap: usize },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("least-squares normal matrix is singular at lambda = {lambda:e}; use lambda > 0")]
    SingularLeastSquares { lambda: f64 },

    #[error("state statistics carry no input sensitivities; propagate with sensitivities enabled")]
    MissingSensitivities,

    #[error("non-finite objective or gradient at iteration {iteration}")]
    NonFinite { iteration: usize, iterate: Vec<f64> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(what: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        Error::Dimension {
            what: what.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
