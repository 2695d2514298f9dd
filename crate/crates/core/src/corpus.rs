//! Parallel sentence-pair corpora: loading, cleaning, contamination checks and
//! nested subsetting for the knowledge-base size sweep.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::RiskCategory;
use crate::text::{loose_key, normalize};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: field `{field}` is empty after normalization")]
    EmptyField { line: usize, field: &'static str },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate id `{id}` on lines {first} and {second}")]
    DuplicateId { id: String, first: usize, second: usize },
    #[error("requested subset of {requested} pairs but the corpus holds {available}")]
    SubsetTooLarge { requested: usize, available: usize },
    #[error("unknown corpus format `{0}` (expected jsonl or tsv)")]
    UnknownFormat(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    Jsonl,
    Tsv,
}

impl CorpusFormat {
    /// Picks the format from a file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("txt") => CorpusFormat::Tsv,
            _ => CorpusFormat::Jsonl,
        }
    }
}

impl std::str::FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(CorpusFormat::Jsonl),
            "tsv" => Ok(CorpusFormat::Tsv),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorpusRole {
    KnowledgeBase,
    TestSet,
}

fn default_true() -> bool {
    true
}

/// Annotation attached to every pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairMeta {
    #[serde(default)]
    pub genre: String,
    #[serde(default)]
    pub work: String,
    /// Every sentence in both corpora is expected to contain a noun-modifying
    /// clause, so a missing flag reads as `true`.
    #[serde(default = "default_true")]
    pub has_nmcc: bool,
    #[serde(default)]
    pub error_tags: BTreeSet<RiskCategory>,
    #[serde(default)]
    pub provenance_note: String,
}

impl Default for PairMeta {
    fn default() -> Self {
        PairMeta {
            genre: String::new(),
            work: String::new(),
            has_nmcc: true,
            error_tags: BTreeSet::new(),
            provenance_note: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub id: String,
    pub source_ja: String,
    pub target_zh: String,
    #[serde(default)]
    pub meta: PairMeta,
}

impl SentencePair {
    pub fn new(id: impl Into<String>, source_ja: &str, target_zh: &str) -> Self {
        SentencePair {
            id: id.into(),
            source_ja: normalize(source_ja),
            target_zh: normalize(target_zh),
            meta: PairMeta::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub pairs: Vec<SentencePair>,
    pub role: CorpusRole,
    pub ordering_seed: u64,
}

impl Corpus {
    pub fn new(pairs: Vec<SentencePair>, role: CorpusRole) -> Self {
        Corpus {
            pairs,
            role,
            ordering_seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&SentencePair> {
        self.pairs.iter().find(|p| p.id == id)
    }

    /// Map from pair id to position, for O(1) resolution of retrieval hits.
    pub fn id_lookup(&self) -> HashMap<&str, &SentencePair> {
        self.pairs.iter().map(|p| (p.id.as_str(), p)).collect()
    }

    /// Ids of knowledge-base pairs not flagged as containing an NMCC.
    pub fn missing_nmcc(&self) -> Vec<&str> {
        self.pairs
            .iter()
            .filter(|p| !p.meta.has_nmcc)
            .map(|p| p.id.as_str())
            .collect()
    }

    /// Content digest over ids and texts, independent of where the file lives.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.pairs {
            hasher.update(p.id.as_bytes());
            hasher.update([0u8]);
            hasher.update(p.source_ja.as_bytes());
            hasher.update([0u8]);
            hasher.update(p.target_zh.as_bytes());
            hasher.update(b"\n");
        }
        hex(&hasher.finalize())
    }

    /// Writes the corpus as JSONL records.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for p in &self.pairs {
            serde_json::to_writer(&mut out, p)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_pairs(path: &Path, format: CorpusFormat, role: CorpusRole) -> Result<Corpus, CorpusError> {
    let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_pairs(&raw, format, role)
}

/// Parses corpus text; line numbers in errors are 1-based.
pub fn parse_pairs(raw: &str, format: CorpusFormat, role: CorpusRole) -> Result<Corpus, CorpusError> {
    let mut pairs = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let pair = match format {
            CorpusFormat::Jsonl => parse_json_record(line, line_no)?,
            CorpusFormat::Tsv => parse_tsv_record(line, line_no)?,
        };
        if let Some(&first) = seen.get(&pair.id) {
            return Err(CorpusError::DuplicateId {
                id: pair.id,
                first,
                second: line_no,
            });
        }
        seen.insert(pair.id.clone(), line_no);
        pairs.push(pair);
    }
    Ok(Corpus::new(pairs, role))
}

fn required_text(value: &serde_json::Value, field: &'static str, line: usize) -> Result<String, CorpusError> {
    match value.get(field) {
        None | Some(serde_json::Value::Null) => Err(CorpusError::MissingField { line, field }),
        Some(serde_json::Value::String(s)) => {
            let s = normalize(s);
            if s.is_empty() {
                Err(CorpusError::EmptyField { line, field })
            } else {
                Ok(s)
            }
        }
        Some(other) => Err(CorpusError::Malformed {
            line,
            message: format!("`{field}` must be a string, found {other}"),
        }),
    }
}

fn parse_json_record(line: &str, line_no: usize) -> Result<SentencePair, CorpusError> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
        line: line_no,
        message: e.to_string(),
    })?;
    if !value.is_object() {
        return Err(CorpusError::Malformed {
            line: line_no,
            message: "record is not a JSON object".into(),
        });
    }
    let id = required_text(&value, "id", line_no)?;
    let source_ja = required_text(&value, "source_ja", line_no)?;
    let target_zh = required_text(&value, "target_zh", line_no)?;
    let meta = match value.get("meta") {
        None | Some(serde_json::Value::Null) => PairMeta::default(),
        Some(m) => serde_json::from_value(m.clone()).map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: format!("meta: {e}"),
        })?,
    };
    Ok(SentencePair {
        id,
        source_ja,
        target_zh,
        meta,
    })
}

fn parse_tsv_record(line: &str, line_no: usize) -> Result<SentencePair, CorpusError> {
    const FIELDS: [&str; 3] = ["id", "source_ja", "target_zh"];
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() > 3 {
        return Err(CorpusError::Malformed {
            line: line_no,
            message: format!("expected 3 tab-separated columns, found {}", cols.len()),
        });
    }
    let mut values = Vec::with_capacity(3);
    for (i, field) in FIELDS.iter().enumerate() {
        let col = cols.get(i).ok_or(CorpusError::MissingField { line: line_no, field })?;
        let v = normalize(col);
        if v.is_empty() {
            return Err(CorpusError::EmptyField { line: line_no, field });
        }
        values.push(v);
    }
    let target_zh = values.pop().unwrap_or_default();
    let source_ja = values.pop().unwrap_or_default();
    let id = values.pop().unwrap_or_default();
    Ok(SentencePair {
        id,
        source_ja,
        target_zh,
        meta: PairMeta::default(),
    })
}

/// Normalizes every pair and drops later duplicates of (source, target).
/// Returns the cleaned corpus and the ids that were removed.
pub fn dedup_and_clean(corpus: Corpus) -> (Corpus, Vec<String>) {
    let Corpus {
        pairs,
        role,
        ordering_seed,
    } = corpus;
    let mut seen = HashSet::new();
    let mut kept = Vec::with_capacity(pairs.len());
    let mut removed = Vec::new();
    for mut pair in pairs {
        pair.source_ja = normalize(&pair.source_ja);
        pair.target_zh = normalize(&pair.target_zh);
        let key = (pair.source_ja.clone(), pair.target_zh.clone());
        if seen.insert(key) {
            kept.push(pair);
        } else {
            removed.push(pair.id);
        }
    }
    (
        Corpus {
            pairs: kept,
            role,
            ordering_seed,
        },
        removed,
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NearMatch {
    pub test_id: String,
    pub kb_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContaminationReport {
    pub exact_matches: Vec<(String, String)>,
    pub near_matches: Vec<NearMatch>,
}

impl ContaminationReport {
    pub fn is_clean(&self) -> bool {
        self.exact_matches.is_empty() && self.near_matches.is_empty()
    }
}

impl std::fmt::Display for ContaminationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_clean() {
            return writeln!(f, "contamination check: clean");
        }
        writeln!(
            f,
            "contamination check: {} exact, {} near",
            self.exact_matches.len(),
            self.near_matches.len()
        )?;
        for (t, k) in &self.exact_matches {
            writeln!(f, "  exact  {t} <-> {k}")?;
        }
        for m in &self.near_matches {
            writeln!(f, "  near   {} <-> {} ({})", m.test_id, m.kb_id, m.reason)?;
        }
        Ok(())
    }
}

pub const NEAR_MATCH_REASON: &str = "whitespace-insensitive match";

/// Reports test/kb pairs whose sources coincide exactly (after normalization) or
/// once whitespace and punctuation are stripped.
pub fn check_disjoint(test: &Corpus, kb: &Corpus) -> ContaminationReport {
    let mut exact_index: HashMap<String, Vec<&str>> = HashMap::new();
    let mut loose_index: HashMap<String, Vec<(&str, String)>> = HashMap::new();
    for p in &kb.pairs {
        let norm = normalize(&p.source_ja);
        loose_index
            .entry(loose_key(&norm))
            .or_default()
            .push((p.id.as_str(), norm.clone()));
        exact_index.entry(norm).or_default().push(p.id.as_str());
    }
    let mut report = ContaminationReport::default();
    for t in &test.pairs {
        let norm = normalize(&t.source_ja);
        if let Some(ids) = exact_index.get(&norm) {
            for id in ids {
                report.exact_matches.push((t.id.clone(), id.to_string()));
            }
        }
        if let Some(cands) = loose_index.get(&loose_key(&norm)) {
            for (id, kb_norm) in cands {
                if *kb_norm != norm {
                    report.near_matches.push(NearMatch {
                        test_id: t.id.clone(),
                        kb_id: id.to_string(),
                        reason: NEAR_MATCH_REASON.to_string(),
                    });
                }
            }
        }
    }
    report
}

/// The seed-shuffled ordering every subset is a prefix of.
pub fn shuffled_order(len: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
}

/// First `size` pairs of the seed-shuffled knowledge base. Subsets for the same
/// seed are nested prefixes of one another.
pub fn subset(kb: &Corpus, size: usize, seed: u64) -> Result<Corpus, CorpusError> {
    if size > kb.len() {
        return Err(CorpusError::SubsetTooLarge {
            requested: size,
            available: kb.len(),
        });
    }
    let pairs = shuffled_order(kb.len(), seed)
        .into_iter()
        .take(size)
        .map(|i| kb.pairs[i].clone())
        .collect();
    Ok(Corpus {
        pairs,
        role: kb.role,
        ordering_seed: seed,
    })
}
