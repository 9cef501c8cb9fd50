use std::path::PathBuf;

use autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PerserError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{} annotation(s) reference missing embeddings: {}", .0.len(), .0.join(", "))]
    MissingEmbeddings(Vec<String>),

    #[error("unknown annotator `{0}`")]
    UnknownAnnotator(String),

    #[error("annotator `{annotator}` has {available} records, need {needed}")]
    InsufficientData {
        annotator: String,
        available: usize,
        needed: usize,
    },

    #[error("invalid embedding file {path}: {message}")]
    Embedding { path: PathBuf, message: String },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("config `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PerserError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Short category name, used for CLI exit messages.
    pub fn category(&self) -> &'static str {
        match self {
            Self::Autodiff(_) | Self::Shape(_) => "shape",
            Self::Contract(_) => "contract",
            Self::Parse { .. } | Self::Embedding { .. } | Self::MissingEmbeddings(_) => "data",
            Self::UnknownAnnotator(_) | Self::InsufficientData { .. } => "data",
            Self::Checkpoint(_) => "checkpoint",
            Self::Config { .. } => "config",
            Self::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, PerserError>;

pub(crate) fn contract<T>(message: impl Into<String>) -> Result<T> {
    Err(PerserError::Contract(message.into()))
}
