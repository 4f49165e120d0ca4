use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid mask: row {row} has no allowed entries")]
    InvalidMask { row: usize },

    #[error("invalid gold data: {0}")]
    InvalidGold(String),

    #[error("infeasible document: {entities} entities but {unique} unique categories")]
    Infeasible { entities: usize, unique: usize },

    #[error("document {doc}, entity {entity}: {reason}")]
    Annotation {
        doc: String,
        entity: usize,
        reason: String,
    },

    #[error("embeddings: {0}")]
    Embeddings(String),

    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),

    #[error("non-finite gradient for parameter {0}")]
    NonFinite(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
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
