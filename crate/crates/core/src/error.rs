use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("noise level {value} at position {index} has no bracket in the training range [{low}, {high}]")]
    OutOfBracket {
        index: usize,
        value: f64,
        low: f64,
        high: f64,
    },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("insufficient history: need {needed} entries, have {have}")]
    InsufficientHistory { needed: usize, have: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("evaluation mask is empty")]
    EmptyMask,
    #[error("need at least {needed} samples, got {have}")]
    TooFewSamples { needed: usize, have: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn shape(expected: impl core::fmt::Display, got: impl core::fmt::Display) -> Self {
        Error::ShapeMismatch {
            expected: alloc::format!("{expected}"),
            got: alloc::format!("{got}"),
        }
    }
}
