use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("duplicate observation for subject {subject}, marker {marker}, occasion {occasion}")]
    DuplicateObservation {
        subject: String,
        marker: String,
        occasion: u32,
    },

    #[error("time {time} for subject {subject} is not on the occasion grid (spacing {spacing}, origin {origin})")]
    GridViolation {
        subject: String,
        time: f64,
        spacing: f64,
        origin: f64,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("marginal covariance of subject {subject} is not positive definite")]
    NotPositiveDefinite { subject: String },

    #[error("marginal covariance of subject {subject} is near-singular (estimated condition number {condition:.3e})")]
    NearSingular { subject: String, condition: f64 },

    #[error("fixed-effects design is rank deficient; collinear columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("nesting violation: alternative log-likelihood {alt} is below null log-likelihood {null}")]
    NestingViolation { null: f64, alt: f64 },

    #[error("invalid output bundle: {0}")]
    InvalidBundle(String),

    #[error("comparison refused: {0}")]
    ComparisonRefused(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
