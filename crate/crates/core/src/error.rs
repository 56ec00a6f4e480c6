use thiserror::Error;

/// Errors raised by estimation, inference and dataset handling.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Sensitivity plus specificity is (numerically) one, so the test carries
    /// no information about prevalence.
    #[error("uninformative test: sensitivity + specificity - 1 = {0:e}")]
    Singular(f64),

    /// The estimated standard error of the prevalence is zero.
    #[error("degenerate test statistic: estimated standard error is zero")]
    DegenerateStatistic,

    /// The logit interval needs a point estimate strictly inside (0, 1).
    #[error("logit undefined at point estimate {0}")]
    LogitUndefined(f64),

    /// A procedure produced no usable result (e.g. every bootstrap replicate
    /// was singular, or no prevalence value was accepted).
    #[error("inference failed: {0}")]
    InferenceFailed(String),

    /// Malformed input bytes.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// Well-formed input violating a dataset invariant.
    #[error("validation error in `{field}`: {message}")]
    Validation { field: String, message: String },

    /// Bad caller request (unknown method tag, inverted range, ...).
    #[error("usage error: {0}")]
    Usage(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn validation(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
