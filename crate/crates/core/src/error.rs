use thiserror::Error;

/// Errors produced anywhere in the quantile-matching pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller-side precondition was violated.
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// Invalid distribution or model parameters.
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    /// An iterative numeric routine failed to converge.
    #[error("{routine} failed to converge: {detail}")]
    Convergence { routine: String, detail: String },

    /// Linear-algebra failure (e.g. a covariance matrix that is not positive definite).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The MCMC sampler could not find a finite starting point.
    #[error("initialization failed: {0}")]
    Initialization(String),

    /// A parameter or column name that does not exist.
    #[error("not found: {0}")]
    Lookup(String),

    /// Malformed input file or text representation.
    #[error("format error: {0}")]
    Format(String),

    /// A hub forecast that cannot be used for fitting after preprocessing.
    #[error("unusable forecast {key}: {reason}")]
    UnusableForecast { key: String, reason: String },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn convergence(routine: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Convergence {
            routine: routine.into(),
            detail: detail.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
