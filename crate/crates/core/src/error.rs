use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("at least two classes are required, got {0}")]
    TooFewClasses(usize),

    #[error("miscoverage level must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),

    #[error("quantile level must be positive and finite, got {0}")]
    InvalidLevel(f64),

    #[error("relaxation slack must be nonnegative, got {0}")]
    NegativeTau(f64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("size mismatch: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },

    #[error("assignment instance of size {size} exceeds the limit of {limit}")]
    Oversize { size: usize, limit: usize },

    #[error("score distribution is degenerate (all values identical)")]
    DegenerateScores,

    #[error("degenerate source hinge correction: L_h(f,P) - delta_P = {0} <= 0")]
    DegenerateHingeCorrection(f64),

    #[error("class {0} has no training samples")]
    MissingClass(usize),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
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
