use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure classes; the CLI maps these onto its exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    Validation,
    Computation,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed NIfTI header: {0}")]
    MalformedHeader(String),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("patch scorer output not normalized: voxel sum {sum} at patch origin {origin:?}")]
    UnnormalizedScores { sum: f32, origin: [isize; 3] },

    #[error("cannot identify the patient left-right axis: {0}")]
    MissingOrientation(String),

    #[error("phantom placement failed: {0}")]
    Placement(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } => ErrorClass::Io,
            Error::MalformedHeader(_)
            | Error::UnsupportedDatatype(_)
            | Error::InvalidGeometry(_)
            | Error::GeometryMismatch(_)
            | Error::InvalidVolume(_)
            | Error::InvalidConfig(_)
            | Error::Json(_) => ErrorClass::Validation,
            Error::Degenerate(_)
            | Error::UnnormalizedScores { .. }
            | Error::MissingOrientation(_)
            | Error::Placement(_) => ErrorClass::Computation,
        }
    }
}
