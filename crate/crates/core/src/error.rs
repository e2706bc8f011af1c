use std::path::PathBuf;

use chrono::{DateTime, Utc};
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: usize, reason: String },

    #[error("line {line}: timestamp {timestamp} is not minute-aligned")]
    MisalignedTimestamp { line: usize, timestamp: String },

    #[error("line {line}: price {price} is not positive")]
    NonPositivePrice { line: usize, price: f64 },

    #[error("duplicate timestamp {0}")]
    DuplicateTimestamp(DateTime<Utc>),

    #[error("no price rows in {0}")]
    EmptyFile(PathBuf),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("insufficient history: need {needed} hourly points, have {available}")]
    InsufficientHistory { needed: usize, available: usize },

    #[error("no bars in window {from} .. {to}")]
    EmptyWindow {
        from: DateTime<Utc>,
        to: DateTime<Utc>,
    },

    #[error("calibration corpus is empty")]
    EmptyCorpus,

    #[error("every trade in the corpus has zero drawdown")]
    AllZeroDrawdowns,

    #[error("baseline NLV {0} is not positive")]
    NonPositiveBaseline(f64),

    #[error("input is empty")]
    EmptyInput,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("input has zero variance")]
    ZeroVariance,

    #[error("need at least 3 samples, got {0}")]
    TooFewSamples(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name, used in structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MalformedRow { .. } => "MalformedRow",
            Error::MisalignedTimestamp { .. } => "MisalignedTimestamp",
            Error::NonPositivePrice { .. } => "NonPositivePrice",
            Error::DuplicateTimestamp(_) => "DuplicateTimestamp",
            Error::EmptyFile(_) => "EmptyFile",
            Error::InvalidParameter(_) => "InvalidParameter",
            Error::InsufficientHistory { .. } => "InsufficientHistory",
            Error::EmptyWindow { .. } => "EmptyWindow",
            Error::EmptyCorpus => "EmptyCorpus",
            Error::AllZeroDrawdowns => "AllZeroDrawdowns",
            Error::NonPositiveBaseline(_) => "NonPositiveBaseline",
            Error::EmptyInput => "EmptyInput",
            Error::LengthMismatch(..) => "LengthMismatch",
            Error::ZeroVariance => "ZeroVariance",
            Error::TooFewSamples(_) => "TooFewSamples",
            Error::Io { .. } => "Io",
            Error::Csv(_) => "Csv",
            Error::Json(_) => "Json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
