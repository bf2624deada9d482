use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the riskview library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("splat {index}: {reason}")]
    InvalidSplat { index: usize, reason: String },

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },

    #[error("point {0:?} lies outside the lattice")]
    OutsideLattice([f64; 3]),

    #[error("vertex {0} is not in the safe set")]
    UnsafeVertex(usize),

    #[error("plan blocked: {0}")]
    Blocked(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
