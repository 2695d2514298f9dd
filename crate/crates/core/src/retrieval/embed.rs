//! Encoders and the persistent embedding cache.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RetrievalError;
use crate::llm::{remote_embedding, with_retries, BackendError, Endpoint, RetryPolicy};
use crate::text::normalize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub dim: usize,
    pub encoder_id: String,
}

impl Embedding {
    pub fn new(vector: Vec<f64>, encoder_id: impl Into<String>) -> Result<Self, RetrievalError> {
        if vector.is_empty() {
            return Err(RetrievalError::EmptyVector);
        }
        if let Some(i) = vector.iter().position(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFinite { index: i });
        }
        Ok(Embedding {
            dim: vector.len(),
            vector,
            encoder_id: encoder_id.into(),
        })
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A text encoder. Implementations must be deterministic for caching to be sound.
pub trait Encoder: Send + Sync {
    fn id(&self) -> String;

    /// Declared output dimension, when known up front.
    fn dim(&self) -> Option<usize>;

    fn encode(&self, text: &str) -> Result<Vec<f64>, BackendError>;
}

/// Hashed character n-gram projection. Every feature (the whole string plus its
/// 1-, 2- and 3-grams) maps to a seeded pseudo-random direction; the embedding
/// is their normalized sum, so texts sharing n-grams land close together.
pub fn mock_embed(text: &str, dim: usize, seed: u64) -> Embedding {
    assert!(dim >= 1, "mock_embed needs dim >= 1");
    let text = normalize(text);
    let chars: Vec<char> = text.chars().collect();
    let mut acc = vec![0.0f64; dim];
    let mut add_feature = |tag: u8, feature: &str| {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update([tag]);
        h.update(feature.as_bytes());
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(key);
        for slot in acc.iter_mut() {
            *slot += rng.gen_range(-1.0..1.0);
        }
    };
    add_feature(0, &text);
    for n in 1..=3usize {
        for w in chars.windows(n) {
            let gram: String = w.iter().collect();
            add_feature(n as u8, &gram);
        }
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut acc {
            *v /= norm;
        }
    } else {
        acc[0] = 1.0;
    }
    Embedding {
        vector: acc,
        dim,
        encoder_id: MockEncoder::new(dim, seed).id(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl MockEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        MockEncoder { dim, seed }
    }
}

impl Encoder for MockEncoder {
    fn id(&self) -> String {
        format!("mock-ngram:d{}:s{}", self.dim, self.seed)
    }

    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        Ok(mock_embed(text, self.dim, self.seed).vector)
    }
}

pub const DEFAULT_REMOTE_ENCODER: &str = "text-embedding-ada-002";

/// Remote embedding model over an OpenAI-compatible `/embeddings` endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEncoder {
    #[serde(flatten)]
    pub endpoint: Endpoint,
    pub model: String,
    pub dim: Option<usize>,
}

impl Encoder for RemoteEncoder {
    fn id(&self) -> String {
        format!("remote:{}", self.model)
    }

    fn dim(&self) -> Option<usize> {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        remote_embedding(&self.endpoint, &self.model, text)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    encoder_id: String,
    text: String,
    vector: Vec<f64>,
}

/// Embedding cache keyed by (encoder id, normalized text). When opened on a
/// file, every new entry is appended as a JSONL record and reloaded on open.
pub struct EmbeddingCache {
    entries: RwLock<HashMap<(String, String), Vec<f64>>>,
    sink: Mutex<Option<File>>,
    path: Option<PathBuf>,
}

impl Default for EmbeddingCache {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        EmbeddingCache {
            entries: RwLock::new(HashMap::new()),
            sink: Mutex::new(None),
            path: None,
        }
    }

    pub fn open(path: &Path) -> Result<Self, RetrievalError> {
        let io_err = |e: std::io::Error| RetrievalError::Io(format!("{}: {e}", path.display()));
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io_err)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                // a torn final line from an interrupted run is skipped, not fatal
                match serde_json::from_str::<CacheRecord>(&line) {
                    Ok(r) => {
                        entries.insert((r.encoder_id, r.text), r.vector);
                    }
                    Err(e) => log::warn!("{}:{}: skipping cache record: {e}", path.display(), i + 1),
                }
            }
        } else if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err)?;
        Ok(EmbeddingCache {
            entries: RwLock::new(entries),
            sink: Mutex::new(Some(file)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, encoder_id: &str, text: &str) -> Option<Vec<f64>> {
        self.entries
            .read()
            .expect("cache lock")
            .get(&(encoder_id.to_string(), normalize(text)))
            .cloned()
    }

    pub fn put(&self, encoder_id: &str, text: &str, vector: Vec<f64>) -> Result<(), RetrievalError> {
        let key = (encoder_id.to_string(), normalize(text));
        let mut sink = self.sink.lock().expect("cache sink lock");
        if let Some(file) = sink.as_mut() {
            let record = CacheRecord {
                encoder_id: key.0.clone(),
                text: key.1.clone(),
                vector: vector.clone(),
            };
            let mut line = serde_json::to_vec(&record).map_err(|e| RetrievalError::Io(e.to_string()))?;
            line.push(b'\n');
            file.write_all(&line).map_err(|e| RetrievalError::Io(e.to_string()))?;
        }
        self.entries.write().expect("cache lock").insert(key, vector);
        Ok(())
    }
}

/// Embeds `text`, serving from the cache when possible.
pub fn embed(
    text: &str,
    encoder: &dyn Encoder,
    cache: &EmbeddingCache,
    retry: RetryPolicy,
) -> Result<Embedding, RetrievalError> {
    let text = normalize(text);
    if text.is_empty() {
        return Err(RetrievalError::EmptyText);
    }
    let encoder_id = encoder.id();
    if let Some(v) = cache.get(&encoder_id, &text) {
        return Embedding::new(v, encoder_id);
    }
    let (vector, _) = with_retries(retry, || encoder.encode(&text))?;
    if let Some(expected) = encoder.dim() {
        if vector.len() != expected {
            return Err(RetrievalError::DimMismatch {
                expected,
                actual: vector.len(),
            });
        }
    }
    let emb = Embedding::new(vector, encoder_id)?;
    cache.put(&emb.encoder_id, &text, emb.vector.clone())?;
    Ok(emb)
}
