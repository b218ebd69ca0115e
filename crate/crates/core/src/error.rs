use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate pose: {0}")]
    DegeneratePose(String),

    #[error(
        "insufficient constraints: {effective} effective points, at least {required} required"
    )]
    InsufficientConstraints { effective: usize, required: usize },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("rank-deficient least-squares system (regularization is zero)")]
    RankDeficient,

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("format error in `{field}`: {reason}")]
    Format { field: String, reason: String },

    #[error("unsupported model version `{found}` (this build reads `{expected}`)")]
    UnsupportedVersion { found: String, expected: String },

    #[error("the oracle descriptor needs ground truth and cannot run on plain images")]
    OracleUnavailable,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn format(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
