use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed input: {0}")]
    MalformedInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("parse error on line {line}: {message}")]
    ParseLine { line: usize, message: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("resolution mismatch: atlas {atlas} m, local map {local} m")]
    ResolutionMismatch { atlas: f64, local: f64 },

    #[error("keyframe {0} is not part of this atlas")]
    UnknownKeyframe(u64),

    #[error("keyframe {0} was already integrated")]
    DuplicateKeyframe(u64),

    #[error("keyframe time {time} is not after the previous keyframe time {previous}")]
    NonMonotonicTime { time: f64, previous: f64 },

    #[error("atlas was loaded from disk and is read-only")]
    ReadOnly,

    #[error("insufficient points: need {needed}, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("frame cannot be localized: {0}")]
    Unlocalizable(String),

    #[error("invalid navigation node: {0}")]
    InvalidNode(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
