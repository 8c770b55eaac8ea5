//! Error type shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TtaError {
    /// A tensor or image did not have the dimensions an operation requires.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// A box clamped to the image covers less than one pixel.
    #[error("degenerate box: clamped area below one pixel")]
    DegenerateBox,

    /// A loss evaluated to NaN or infinity, signalling diverged prompts.
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(f64),

    /// Hallucination was requested while the instance memory is empty.
    #[error("instance memory is empty, nothing to hallucinate from")]
    NoMemory,

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A dataset, prediction, or checkpoint file failed to parse.
    #[error("{path}:{line}: {message}")]
    MalformedFile {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl TtaError {
    pub fn shape(
        context: &'static str,
        expected: impl Into<String>,
        got: impl Into<String>,
    ) -> Self {
        TtaError::Shape {
            context,
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TtaError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, TtaError>;
