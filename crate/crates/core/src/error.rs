use std::fmt;

/// Errors raised across the crate.
#[derive(Debug)]
pub enum Error {
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A softmax row with no admissible entry (empty attention context).
    FullyMasked {
        row: usize,
    },
    IndexOutOfRange {
        index: usize,
        bound: usize,
    },
    SequenceTooLong {
        len: usize,
        max: usize,
    },
    NotScalar {
        shape: Vec<usize>,
    },
    Empty(&'static str),
    InvalidConfig(String),
    ConfigMismatch {
        field: String,
    },
    CorruptCheckpoint(String),
    NonFiniteLoss {
        step: u64,
        loss: f64,
    },
    Io(std::io::Error),
    Json(serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Self::FullyMasked { row } => {
                write!(f, "softmax row {row} is fully masked (empty attention context)")
            }
            Self::IndexOutOfRange { index, bound } => {
                write!(f, "index {index} out of range (bound {bound})")
            }
            Self::SequenceTooLong { len, max } => {
                write!(f, "sequence length {len} exceeds maximum {max}")
            }
            Self::NotScalar { shape } => write!(f, "expected a scalar, got shape {shape:?}"),
            Self::Empty(what) => write!(f, "empty input: {what}"),
            Self::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Self::ConfigMismatch { field } => {
                write!(f, "checkpoint config mismatch at field `{field}`")
            }
            Self::CorruptCheckpoint(msg) => write!(f, "corrupt checkpoint: {msg}"),
            Self::NonFiniteLoss { step, loss } => {
                write!(f, "non-finite loss {loss} at step {step}")
            }
            Self::Io(e) => write!(f, "i/o error: {e}"),
            Self::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(e) => Some(e),
            Self::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Self::Json(e)
    }
}
