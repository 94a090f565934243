use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("zero extent: point cloud has no spatial extent")]
    ZeroExtent,
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("non-finite coordinate at index {0}")]
    NonFinite(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("degenerate mesh: {0}")]
    DegenerateMesh(String),
    #[error("cage construction failed: {0}")]
    CageConstruction(String),
    #[error("influence mask leaves cage vertex {0} without a keypoint")]
    MaskCoverage(usize),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("database is stale: expected bundle fingerprint {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error("degenerate shape: {0}")]
    DegenerateShape(String),
    #[error("parse error in {path}: {location}: {message}")]
    Parse {
        path: PathBuf,
        location: String,
        message: String,
    },
    #[error("blob {path}: bad {field}")]
    Blob { path: PathBuf, field: &'static str },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
