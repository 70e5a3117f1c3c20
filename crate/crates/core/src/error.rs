use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}: no frames")]
    NoFrames(PathBuf),

    #[error("{path}: unsupported input ({reason})")]
    UnsupportedFormat { path: PathBuf, reason: String },

    #[error("frame {index}: {reason}")]
    CorruptFrame { index: u64, reason: String },

    #[error("region of interest {0}")]
    InvalidRoi(String),

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (u32, u32),
        actual: (u32, u32),
    },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("{origin}:{line}: {reason}")]
    Config {
        origin: String,
        line: usize,
        reason: String,
    },

    #[error("unknown configuration key `{key}` ({origin}:{line})")]
    UnknownKey {
        origin: String,
        line: usize,
        key: String,
    },

    #[error("labels: {0}")]
    Labels(String),

    #[error("detections: {0}")]
    Detections(String),

    #[error("length mismatch: {predictions} predictions vs {truth} labels")]
    LengthMismatch { predictions: usize, truth: usize },

    #[error("confusion matrix is empty")]
    EmptyMatrix,

    #[error("grid search: {0}")]
    Grid(String),

    #[error("frame {index}: {source}")]
    AtFrame {
        index: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("{0}")]
    Csv(#[from] csv::Error),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn at_frame(self, index: u64) -> Self {
        match self {
            e @ (Error::AtFrame { .. } | Error::CorruptFrame { .. }) => e,
            e => Error::AtFrame {
                index,
                source: Box::new(e),
            },
        }
    }

    /// True for errors caused by the caller's configuration or arguments.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter { .. }
                | Error::Config { .. }
                | Error::UnknownKey { .. }
                | Error::InvalidRoi(_)
        )
    }
}
