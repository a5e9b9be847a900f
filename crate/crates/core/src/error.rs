use std::path::PathBuf;

use autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MimeError {
    #[error(transparent)]
    Tensor(#[from] AutodiffError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown emotion label {0:?}")]
    UnknownEmotion(String),

    #[error("emotion label id {0} out of range")]
    LabelOutOfRange(usize),

    #[error("invalid emotion grouping: {0}")]
    Grouping(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("pretrained embeddings: {0}")]
    Embeddings(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("self-attention mask is not causal: query {query} may attend to key {key}")]
    NonCausalMask { query: usize, key: usize },

    #[error("non-finite loss component {0}")]
    NonFiniteLoss(&'static str),

    #[error("{0}")]
    Invalid(String),
}

impl MimeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MimeError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, MimeError>;
