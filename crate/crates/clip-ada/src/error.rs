use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error("image {height}x{width} is not divisible by patch size {patch_size}")]
    PatchDivisibility {
        height: usize,
        width: usize,
        patch_size: usize,
    },

    #[error("assembled prompt length {length} exceeds the encoder context limit {limit}")]
    ContextOverflow { length: usize, limit: usize },

    #[error("insert position {position} is out of range (template length {limit})")]
    PositionOutOfRange { position: usize, limit: usize },

    #[error("tokenizer failure: {0}")]
    Tokenizer(String),

    #[error("metric requires both classes, got a single class")]
    SingleClass,

    #[error("average precision requires at least one positive label")]
    NoPositives,

    #[error("anomalous test image {0} has no ground-truth mask")]
    MissingMask(PathBuf),

    #[error("dataset layout error: {0}")]
    Layout(String),

    #[error("no score recorded for test image {0}")]
    MissingScore(PathBuf),

    #[error("train fraction {0} is out of range (0, 1]")]
    FractionOutOfRange(f64),

    #[error("incompatible configuration: {0}")]
    IncompatibleConfig(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at step {step}; aborting training")]
    NonFiniteLoss { step: u64 },

    #[error("checkpoint container error: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image I/O error: {0}")]
    Image(#[from] image::ImageError),
}

/// Coarse error category used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Runtime,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            IncompatibleConfig(_) | InvalidConfig(_) | FractionOutOfRange(_)
            | PositionOutOfRange { .. } | ContextOverflow { .. } => ErrorCategory::Config,
            MissingMask(_) | Layout(_) | MissingScore(_) | Io(_) | Image(_) | Tokenizer(_) => {
                ErrorCategory::Data
            }
            _ => ErrorCategory::Runtime,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
