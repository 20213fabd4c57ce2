use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("non-finite value produced by {layer}")]
    NonFinite { layer: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} at index {index} is out of range for {classes} classes")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },

    #[error("regions missing from predictions: {0:?}")]
    MissingRegions(Vec<String>),

    #[error("regions listed more than once: {0:?}")]
    DuplicateRegions(Vec<String>),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("training diverged in {job} at epoch {epoch}")]
    Divergence { job: String, epoch: usize },

    #[error("artifact {artifact} was produced by config {found}, expected {expected}")]
    HashMismatch {
        artifact: String,
        expected: String,
        found: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line driver:
    /// 1 usage/config, 2 data, 3 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::HashMismatch { .. } | Error::Toml(_) => 1,
            Error::NonFinite { .. } | Error::Divergence { .. } => 3,
            _ => 2,
        }
    }
}
