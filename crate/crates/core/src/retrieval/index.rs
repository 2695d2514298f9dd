//! Flat L2 index and its on-disk snapshot.
//!
//! Snapshot layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "RAGMTIDX"
//! version      u32       currently 1
//! flags        u32       bit 0: vectors were L2-normalized at build time
//! dim          u32
//! encoder_len  u32       followed by encoder_len bytes of UTF-8 encoder id
//! count        u64
//! count × entry:
//!   id_len     u32       followed by id_len bytes of UTF-8 pair id
//!   vector     dim × f32
//! ```

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::io::{Read, Write};

use super::embed::{embed, Embedding, EmbeddingCache, Encoder};
use super::{similarity, RetrievalError, RetrievalHit, RetrieverConfig};
use crate::corpus::Corpus;
use crate::llm::RetryPolicy;

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"RAGMTIDX";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub pair_id: String,
    pub vector: Vec<f32>,
}

/// Exact flat index. Vectors are stored in single precision, matching the
/// snapshot format, so a loaded snapshot searches identically to the original.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    pub dim: usize,
    pub encoder_id: String,
    pub normalized: bool,
    pub entries: Vec<IndexEntry>,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

impl VectorIndex {
    pub fn new(dim: usize, encoder_id: impl Into<String>, normalized: bool) -> Self {
        VectorIndex {
            dim,
            encoder_id: encoder_id.into(),
            normalized,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, pair_id: impl Into<String>, emb: &Embedding) -> Result<(), RetrievalError> {
        self.check_compatible(emb)?;
        let v = if self.normalized {
            unit(&emb.vector)
        } else {
            emb.vector.clone()
        };
        self.entries.push(IndexEntry {
            pair_id: pair_id.into(),
            vector: v.iter().map(|&x| x as f32).collect(),
        });
        Ok(())
    }

    pub fn check_compatible(&self, emb: &Embedding) -> Result<(), RetrievalError> {
        if emb.encoder_id != self.encoder_id {
            return Err(RetrievalError::EncoderMismatch {
                index: self.encoder_id.clone(),
                query: emb.encoder_id.clone(),
            });
        }
        if emb.dim != self.dim || emb.vector.len() != self.dim {
            return Err(RetrievalError::DimMismatch {
                expected: self.dim,
                actual: emb.vector.len(),
            });
        }
        Ok(())
    }

    /// Verifies that the index ids are exactly the corpus ids, each once.
    pub fn check_linkage(&self, kb: &Corpus) -> Result<(), RetrievalError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.pair_id.as_str()) {
                return Err(RetrievalError::Snapshot(format!(
                    "duplicate index entry `{}`",
                    e.pair_id
                )));
            }
        }
        let kb_ids: HashSet<&str> = kb.pairs.iter().map(|p| p.id.as_str()).collect();
        if seen != kb_ids {
            return Err(RetrievalError::Snapshot(format!(
                "index holds {} ids, knowledge base {}; sets differ",
                seen.len(),
                kb_ids.len()
            )));
        }
        Ok(())
    }

    pub fn write_snapshot<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(SNAPSHOT_MAGIC)?;
        out.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        out.write_all(&(self.normalized as u32).to_le_bytes())?;
        out.write_all(&(self.dim as u32).to_le_bytes())?;
        out.write_all(&(self.encoder_id.len() as u32).to_le_bytes())?;
        out.write_all(self.encoder_id.as_bytes())?;
        out.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            out.write_all(&(e.pair_id.len() as u32).to_le_bytes())?;
            out.write_all(e.pair_id.as_bytes())?;
            for x in &e.vector {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_snapshot_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_snapshot(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_snapshot<R: Read>(mut input: R) -> Result<Self, RetrievalError> {
        let bad = |m: &str| RetrievalError::Snapshot(m.to_string());
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(&mut input)?;
        if version != SNAPSHOT_VERSION {
            return Err(RetrievalError::Snapshot(format!("unsupported version {version}")));
        }
        let flags = read_u32(&mut input)?;
        let dim = read_u32(&mut input)? as usize;
        if dim == 0 {
            return Err(bad("dim is zero"));
        }
        let encoder_id = read_string(&mut input)?;
        let mut count_bytes = [0u8; 8];
        input
            .read_exact(&mut count_bytes)
            .map_err(|_| bad("truncated header"))?;
        let count = u64::from_le_bytes(count_bytes) as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let pair_id = read_string(&mut input)?;
            let mut vector = Vec::with_capacity(dim);
            let mut b = [0u8; 4];
            for _ in 0..dim {
                input.read_exact(&mut b).map_err(|_| bad("truncated entry"))?;
                vector.push(f32::from_le_bytes(b));
            }
            entries.push(IndexEntry { pair_id, vector });
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest).map_err(|e| RetrievalError::Io(e.to_string()))? != 0 {
            return Err(bad("trailing bytes after last entry"));
        }
        Ok(VectorIndex {
            dim,
            encoder_id,
            normalized: flags & 1 == 1,
            entries,
        })
    }
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32, RetrievalError> {
    let mut b = [0u8; 4];
    input
        .read_exact(&mut b)
        .map_err(|_| RetrievalError::Snapshot("truncated field".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(input: &mut R) -> Result<String, RetrievalError> {
    let len = read_u32(input)? as usize;
    let mut buf = vec![0u8; len];
    input
        .read_exact(&mut buf)
        .map_err(|_| RetrievalError::Snapshot("truncated string".into()))?;
    String::from_utf8(buf).map_err(|_| RetrievalError::Snapshot("string is not UTF-8".into()))
}

/// Embeds every knowledge-base source sentence, in corpus order. Any failure
/// aborts the build.
pub fn build_index(
    kb: &Corpus,
    encoder: &dyn Encoder,
    cache: &EmbeddingCache,
    cfg: &RetrieverConfig,
    retry: RetryPolicy,
) -> Result<VectorIndex, RetrievalError> {
    if kb.is_empty() {
        return Err(RetrievalError::EmptyKnowledgeBase);
    }
    let mut index: Option<VectorIndex> = None;
    for pair in &kb.pairs {
        let wrap = |e: RetrievalError| RetrievalError::EntryFailed {
            id: pair.id.clone(),
            source: Box::new(e),
        };
        let emb = embed(&pair.source_ja, encoder, cache, retry).map_err(wrap)?;
        let idx = index.get_or_insert_with(|| VectorIndex::new(emb.dim, emb.encoder_id.clone(), cfg.normalize_vectors));
        idx.insert(pair.id.clone(), &emb).map_err(wrap)?;
    }
    Ok(index.expect("non-empty kb yields an index"))
}

fn l2(query: &[f64], entry: &[f32]) -> f64 {
    query
        .iter()
        .zip(entry)
        .map(|(q, e)| {
            let d = q - f64::from(*e);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Max-heap key: the worst current candidate sits on top.
struct Candidate {
    distance: f64,
    position: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.position.cmp(&other.position))
    }
}

/// Exact top-k search by ascending L2 distance; ties go to the earlier entry.
pub fn search(
    index: &VectorIndex,
    query: &Embedding,
    cfg: &RetrieverConfig,
) -> Result<Vec<RetrievalHit>, RetrievalError> {
    if cfg.k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    index.check_compatible(query)?;
    let q = if index.normalized {
        unit(&query.vector)
    } else {
        query.vector.clone()
    };
    let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(cfg.k + 1);
    for (position, entry) in index.entries.iter().enumerate() {
        let cand = Candidate {
            distance: l2(&q, &entry.vector),
            position,
        };
        if heap.len() < cfg.k {
            heap.push(cand);
        } else if let Some(worst) = heap.peek() {
            if cand < *worst {
                heap.pop();
                heap.push(cand);
            }
        }
    }
    heap.into_sorted_vec()
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            Ok(RetrievalHit {
                pair_id: index.entries[c.position].pair_id.clone(),
                distance: c.distance,
                similarity: similarity(c.distance)?,
                rank: i + 1,
            })
        })
        .collect()
}
