use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("simulation diverged at step {step} (|x| = {value:e} exceeds bound)")]
    Divergence { step: usize, value: f64 },

    #[error("no saddle-node found")]
    NoSaddleNode,

    #[error("no stationary point of the equilibrium curve found for {0}")]
    NoStationaryPoint(String),

    #[error("coefficient sampler exhausted after {0} attempts")]
    SamplerExhausted(usize),

    #[error("window of {window} samples does not fit a series of {len} samples")]
    WindowTooLarge { window: usize, len: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dataset too small: {0}")]
    DatasetTooSmall(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("non-numeric time value `{value}` on data row {row}")]
    NonNumericTime { row: usize, value: String },

    #[error("need at least 2 valid rows, found {0}")]
    TooFewRows(usize),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("not supported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    /// Process exit code: 2 usage, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Unsupported(_) => 2,
            Error::NonFinite(_)
            | Error::Divergence { .. }
            | Error::NoSaddleNode
            | Error::NoStationaryPoint(_)
            | Error::SamplerExhausted(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
