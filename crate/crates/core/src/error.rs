use std::path::PathBuf;

use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up for an operation.
    #[error("{op}: dimension mismatch, {details}")]
    Dimension { op: &'static str, details: String },

    /// A caller-supplied value is outside the operation's domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A configuration value fails validation.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A stateful protocol was violated (e.g. a missing previous alignment).
    #[error("invalid state: {0}")]
    State(String),

    /// The target cannot be aligned to the available frames.
    #[error(
        "no alignment exists: {labels} labels need at least {min_frames} frames, got {frames}"
    )]
    ImpossibleAlignment {
        labels: usize,
        min_frames: usize,
        frames: usize,
    },

    /// The input sequence is too short for the encoder's subsampling.
    #[error("input too short: {frames} frames, subsampling needs at least {min_frames}")]
    InputTooShort { frames: usize, min_frames: usize },

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// An exhaustive test oracle was asked for an intractably large instance.
    #[error("instance too large: {0}")]
    Guard(String),

    /// A binary file is malformed; `offset` points at the offending byte.
    #[error("{}: byte {offset}: {details}", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        details: String,
    },

    /// A text file is malformed; `line` is 1-based.
    #[error("{}: line {line}: {details}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        details: String,
    },

    /// A transcript character is not in the vocabulary.
    #[error("out-of-vocabulary character {ch:?} at position {position}")]
    Oov { ch: char, position: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, details: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            details: details.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
