use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed NIfTI header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("non-3D payload in {path}: {reason}")]
    NotVolumetric { path: PathBuf, reason: String },

    #[error("non-finite voxel values in {path}")]
    NonFiniteVoxels { path: PathBuf },

    #[error("no modality files found for subject {subject} in {dir}")]
    NoModalities { subject: String, dir: PathBuf },

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("invalid study {subject}: {reason}")]
    InvalidStudy { subject: String, reason: String },

    #[error("unknown modality {0:?}")]
    UnknownModality(String),

    #[error("degenerate volume: standard deviation {sigma:e} below 1e-8")]
    DegenerateVolume { sigma: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("missing parameter {0}")]
    MissingParameter(String),

    #[error("scenario mismatch: {0}")]
    ScenarioMismatch(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("numeric failure: {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Broad class used by the command-line front end to pick an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::UnknownModality(_) => ErrorKind::Usage,
            Error::NonFinite(_) | Error::DegenerateVolume { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}
