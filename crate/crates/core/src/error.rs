use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid domain: {0}")]
    Domain(String),

    #[error("coordinate ({lon}, {lat}) lies outside the domain")]
    OutOfDomain { lon: f64, lat: f64 },

    #[error("pixel holds {stations} stations but only {capacity} samples were requested")]
    Capacity { stations: usize, capacity: usize },

    #[error("no normalization spec for variable `{0}`")]
    MissingSpec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("routing error: {0}")]
    Routing(String),

    #[error("degenerate loss: {0}")]
    DegenerateLoss(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("unsupported format version `{found}` (expected `{expected}`)")]
    Version { found: String, expected: String },

    #[error("{}: expected {expected} bytes, found {found}", path.display())]
    LengthMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("missing file {}", path.display())]
    MissingFile { path: PathBuf },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFinite {
        what: String,
        epoch: usize,
        batch: usize,
    },

    #[error("refusing to write into non-empty directory {} (use --force)", path.display())]
    DirectoryNotEmpty { path: PathBuf },

    #[error("directory {} is locked by another writer", path.display())]
    Locked { path: PathBuf },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("tensor: {0}")]
    Candle(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
