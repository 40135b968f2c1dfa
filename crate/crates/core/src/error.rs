use std::path::PathBuf;

use crate::planar::Plane;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(usize),

    #[error("dimensions {0}x{1}x{2} overflow or are zero")]
    BadDims(u32, u32, u32),

    #[error("label value {value} exceeds class count K={num_classes}")]
    LabelRange { value: u8, num_classes: u16 },

    #[error("non-finite intensity at voxel {0}")]
    NonFinite(usize),

    #[error("invalid window [{lo}, {hi}]: hi must exceed lo")]
    InvalidWindow { lo: f32, hi: f32 },

    #[error("slice index {index} out of range for {plane} plane (extent {extent})")]
    SliceIndex {
        plane: Plane,
        index: usize,
        extent: usize,
    },

    #[error("cannot reconstruct along {plane} plane: expected {expected}, got {found}")]
    Reconstruction {
        plane: Plane,
        expected: String,
        found: String,
    },

    #[error("dimension mismatch: {0}")]
    DimsMismatch(String),

    #[error("class count mismatch: {0}")]
    ClassMismatch(String),

    #[error("non-finite gradient at step {step} (loss {loss})")]
    NonFiniteGradient { step: u64, loss: f64 },

    #[error("empty training set: {0}")]
    EmptyTrainingSet(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("phantom generation failed: {0}")]
    Generation(String),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("run aborted after {} logged events: {source}", log.events.len())]
    RunAborted {
        source: Box<Error>,
        log: Box<crate::cotrain::RunLog>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::BadMagic { .. } => "bad-magic",
            Error::UnsupportedVersion(_) => "version",
            Error::Truncated { .. } => "truncated",
            Error::TrailingBytes(_) => "trailing-bytes",
            Error::BadDims(..) => "dims",
            Error::LabelRange { .. } => "label-range",
            Error::NonFinite(_) => "non-finite",
            Error::InvalidWindow { .. } => "window",
            Error::SliceIndex { .. } => "slice-index",
            Error::Reconstruction { .. } => "reconstruction",
            Error::DimsMismatch(_) => "dims-mismatch",
            Error::ClassMismatch(_) => "class-mismatch",
            Error::NonFiniteGradient { .. } => "non-finite-gradient",
            Error::EmptyTrainingSet(_) => "empty-training-set",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Generation(_) => "generation",
            Error::Config { .. } => "config",
            Error::RunAborted { .. } => "aborted",
            Error::Json(_) => "json",
        }
    }
}
