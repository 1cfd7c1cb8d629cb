use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::graph::GraphError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("identities with fewer than {required} images: {identities:?}")]
    TooFewImages {
        required: usize,
        identities: Vec<u32>,
    },
    #[error("no probe images of identity {0}")]
    MissingProbeIdentity(u32),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("matrix is not symmetric (max |M - Mᵀ| = {0:e})")]
    Asymmetric(f64),
    #[error("matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("no evaluable probes")]
    NoEvaluableProbes,
    #[error("{file}: perturbation {found} exceeds epsilon {epsilon}")]
    EpsilonViolation {
        file: String,
        found: f64,
        epsilon: f64,
    },
    #[error("unparsable image file name {0}")]
    BadFileName(String),
    #[error("no images found in {0}")]
    NoImages(PathBuf),
    #[error("mixed image sizes: {first} has {expected:?} but {file} has {found:?}")]
    MixedSizes {
        first: String,
        file: String,
        expected: (u32, u32, usize),
        found: (u32, u32, usize),
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
