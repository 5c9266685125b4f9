use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("argument out of domain: {0}")]
    Domain(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid probability {value} at flat index {index}")]
    InvalidProbability { value: f64, index: usize },
    #[error("non-binary value {value} at flat index {index}")]
    NonBinary { value: u8, index: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("perturbation depth {depth} outside 1..={max}")]
    DepthOutOfRange { depth: usize, max: usize },
    #[error("could not place building {building} after {attempts} attempts")]
    InfeasiblePlacement { building: usize, attempts: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("missing manifest at {0}")]
    MissingManifest(PathBuf),
    #[error("missing mask for labeled id {0:?}")]
    MissingPair(String),
    #[error("size mismatch for {id:?}: {detail}")]
    SizeMismatch { id: String, detail: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch { expected: expected.to_vec(), got: got.to_vec() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
