use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the segmentation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("invalid window: lo ({lo}) must be below hi ({hi})")]
    InvalidWindow { lo: f64, hi: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("non-positive target size {0:?}")]
    NonPositiveTarget(Vec<usize>),
    #[error("backward root must be a scalar, got shape {0:?}")]
    RootNotScalar(Vec<usize>),
    #[error("backward root is not on the tape")]
    RootNotOnTape,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("volume {dims:?} is smaller than patch {patch:?}")]
    VolumeSmallerThanPatch { dims: [usize; 3], patch: [usize; 3] },
    #[error("missing prediction for window {0}")]
    MissingWindow(usize),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::NonFinite(_))
    }
}
