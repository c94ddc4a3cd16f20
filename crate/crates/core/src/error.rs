use thiserror::Error;

/// Errors raised by the calibration toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid alpha {0}: must lie strictly between 0 and 1")]
    InvalidAlpha(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("score kind {0} requires a predictor")]
    MissingPredictor(&'static str),

    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },

    #[error("label kind does not match score kind {0}")]
    LabelKind(&'static str),

    #[error("probability vector invalid: {0}")]
    InvalidProbabilities(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("total weight is zero")]
    ZeroWeight,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Failure class used for diagnostics and exit codes.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidAlpha(_) | Error::Config(_) => "config",
            Error::Numeric(_) | Error::ZeroWeight => "numeric",
            Error::Io(_) | Error::Json(_) => "io",
            _ => "data",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}
