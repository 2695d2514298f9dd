//! Embedding-based example retrieval: exact L2 search over a flat index whose
//! entries link one-to-one to knowledge-base pairs.

mod embed;
mod index;

pub use embed::{
    embed, mock_embed, Embedding, EmbeddingCache, Encoder, MockEncoder, RemoteEncoder, DEFAULT_REMOTE_ENCODER,
};
pub use index::{build_index, search, IndexEntry, VectorIndex, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::RetryExhausted;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding has no components")]
    EmptyVector,
    #[error("embedding component {index} is not finite")]
    NonFinite { index: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("encoder mismatch: index built with `{index}`, query from `{query}`")]
    EncoderMismatch { index: String, query: String },
    #[error("cannot build an index from an empty knowledge base")]
    EmptyKnowledgeBase,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("distance must be finite and non-negative, got {0}")]
    InvalidDistance(f64),
    #[error("embedding `{id}` failed: {source}")]
    EntryFailed {
        id: String,
        #[source]
        source: Box<RetrievalError>,
    },
    #[error("encoder failed: {0}")]
    Encoder(#[from] RetryExhausted),
    #[error("index snapshot: {0}")]
    Snapshot(String),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrieverConfig {
    pub k: usize,
    pub normalize_vectors: bool,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        RetrieverConfig {
            k: 5,
            normalize_vectors: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub pair_id: String,
    pub distance: f64,
    pub similarity: f64,
    pub rank: usize,
}

/// Maps an L2 distance onto (0, 1] as `1 / (1 + d)`; strictly decreasing in `d`.
pub fn similarity(distance: f64) -> Result<f64, RetrievalError> {
    if !distance.is_finite() || distance < 0.0 {
        return Err(RetrievalError::InvalidDistance(distance));
    }
    Ok(1.0 / (1.0 + distance))
}
