use std::io;

use thiserror::Error;

pub type Result<T, E = SddError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SddError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid range: lo={lo} must be < hi={hi}")]
    InvalidRange { lo: f64, hi: f64 },

    #[error("value {value} at ({row}, {col}) lies outside the scale range [{lo}, {hi}]")]
    OutOfRange {
        row: usize,
        col: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("time {0} is outside [0, 1]")]
    Domain(f64),

    #[error("degenerate step: alpha({t}) = 1, noise estimate is undefined")]
    DegenerateStep { t: f64 },

    #[error("sparsity-bit target {value} at ({row}, {col}) is not in {{-1, +1}}")]
    Label { row: usize, col: usize, value: f64 },

    #[error("training diverged at step {step}: non-finite loss")]
    Divergence { step: u64 },

    #[error("backward called without a matching cached forward pass")]
    State,

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("invalid spec: {0}")]
    Spec(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("format error at line {line}: {msg}")]
    FormatLine { line: usize, msg: String },

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SddError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        SddError::Shape(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        SddError::Argument(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        SddError::Format {
            offset,
            msg: msg.into(),
        }
    }

    /// True for errors caused by malformed inputs (files, configs, arguments)
    /// as opposed to numerical failures.
    pub fn is_usage(&self) -> bool {
        !matches!(self, SddError::Divergence { .. } | SddError::DegenerateStep { .. })
    }
}
