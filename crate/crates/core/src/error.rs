use thiserror::Error;

use crate::features::LatentLocation;

/// Errors raised by the training engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("image is {width}x{height} but at least {min_width}x{min_height} pixels are required")]
    ImageTooSmall {
        width: usize,
        height: usize,
        min_width: usize,
        min_height: usize,
    },

    #[error("window {window_h}x{window_w} at {location:?} does not fit inside the level grid")]
    OutOfBounds {
        location: LatentLocation,
        window_h: usize,
        window_w: usize,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty pyramid")]
    EmptyPyramid,

    #[error("no retained locations in the corpus")]
    EmptyCorpus,

    #[error("parse error at byte {offset}: {kind}")]
    Parse { offset: usize, kind: ParseErrorKind },

    #[error("solver did not converge: {0}")]
    NotConverged(String),

    #[error("matrix is not positive semidefinite (min diagonal/eigen estimate {0:e})")]
    NotPsd(f64),

    #[error("objective diverged: {0}")]
    Diverged(String),

    #[error("non-monotone objective step: {0}")]
    NonMonotone(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// The distinct ways a binary feature or model file can be malformed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    BadMagic,
    UnsupportedVersion(u32),
    Truncated,
    InconsistentDimension {
        level: usize,
        expected: usize,
        actual: usize,
    },
    InvalidHeader(String),
}

impl std::fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParseErrorKind::BadMagic => write!(f, "bad magic"),
            ParseErrorKind::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            ParseErrorKind::Truncated => write!(f, "truncated payload"),
            ParseErrorKind::InconsistentDimension {
                level,
                expected,
                actual,
            } => write!(
                f,
                "level {level} has descriptor dimension {actual}, expected {expected}"
            ),
            ParseErrorKind::InvalidHeader(s) => write!(f, "invalid header: {s}"),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
