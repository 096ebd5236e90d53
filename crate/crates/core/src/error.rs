use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
///
/// Variants are grouped by [`ErrorCategory`] so the command-line front end
/// can map them onto distinct exit codes.
#[derive(Debug, Error)]
pub enum EdpaError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{op} of non-positive value {value} at flat index {index}")]
    NonPositive { op: &'static str, index: usize, value: f64 },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("image {height}x{width} is not divisible into {patch}x{patch} blocks")]
    NotDivisible { height: usize, width: usize, patch: usize },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("instruction of {len} tokens exceeds maximum {max}")]
    InstructionTooLong { len: usize, max: usize },

    #[error("{what} {inner:?} does not fit inside {outer:?}")]
    OutOfBounds {
        what: &'static str,
        inner: Vec<usize>,
        outer: Vec<usize>,
    },

    #[error("non-finite value in {what} at iteration {iteration}: {detail}")]
    NonFinite {
        what: String,
        iteration: usize,
        detail: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("format error in {context}: {message}")]
    Format { context: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse failure classes used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Input,
    Numeric,
    Format,
    Io,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Input => 2,
            ErrorCategory::Format => 3,
            ErrorCategory::Io => 4,
            ErrorCategory::Numeric => 5,
        }
    }
}

impl EdpaError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            EdpaError::NonPositive { .. } | EdpaError::NonFinite { .. } => ErrorCategory::Numeric,
            EdpaError::Format { .. } => ErrorCategory::Format,
            EdpaError::Io { .. } => ErrorCategory::Io,
            _ => ErrorCategory::Input,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EdpaError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        EdpaError::Format {
            context: context.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, EdpaError>;
