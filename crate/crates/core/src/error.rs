//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("no mask found for image '{id}'")]
    MissingMask { id: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("mask '{id}' belongs to the val split; only train masks may condition generation")]
    ValLeakage { id: String },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("feature file {path}: {message}")]
    FeatureFile { path: PathBuf, message: String },

    #[error("non-finite loss at iteration {iteration} (batch [{batch}])")]
    NonFiniteLoss { iteration: usize, batch: String },

    #[error("non-finite matching cost at query {query}, instance {instance}")]
    NonFiniteCost { query: usize, instance: usize },

    #[error("top-k selection: k={k} outside [1, {max}]")]
    TopKRange { k: usize, max: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
