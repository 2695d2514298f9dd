//! Configuration files, command-line overrides and config hashing.
//!
//! A config file is TOML with three tables:
//!
//! ```toml
//! [paths]
//! kb = "data/kb.jsonl"
//! test = "data/test.jsonl"
//! out = "out"
//! embedding_cache = "out/embeddings.jsonl"
//!
//! [pipeline]
//! seed = 42
//! sizes = [0, 100, 200, 500, 1000, 2000]
//! retriever = { k = 5, normalize_vectors = false }
//! encoder = { kind = "mock", dim = 64, seed = 7 }
//! analysis = { kind = "scripted", a1_default = "ANSWER: INNER", a2_default = "ANSWER: NONE" }
//! generation = { kind = "copy" }
//!
//! [service]
//! bind = "127.0.0.1:8080"
//! ```
//!
//! Only `[pipeline]` takes part in the config hash; paths and service settings
//! describe where a run happens, not what it computes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{JudgmentBackend, RemoteJudge, ScriptedStub, StubScript};
use crate::corpus::hex;
use crate::generation::{CopyStub, FixedStub, RemoteTranslator, Translator};
use crate::llm::{ChatClient, Endpoint, RetryPolicy};
use crate::retrieval::{Encoder, MockEncoder, RemoteEncoder, RetrieverConfig, DEFAULT_REMOTE_ENCODER};

pub const DEFAULT_SIZES: [usize; 6] = [0, 100, 200, 500, 1000, 2000];
pub const DEFAULT_GENERATION_MODEL: &str = "gpt-4o";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("override `{0}` is not of the form key=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    Mock {
        #[serde(default = "default_mock_dim")]
        dim: usize,
        #[serde(default = "default_mock_seed")]
        seed: u64,
    },
    Remote {
        #[serde(default = "default_encoder_model")]
        model: String,
        #[serde(default)]
        dim: Option<usize>,
        #[serde(flatten)]
        endpoint: Endpoint,
    },
}

fn default_mock_dim() -> usize {
    64
}

fn default_mock_seed() -> u64 {
    7
}

fn default_encoder_model() -> String {
    DEFAULT_REMOTE_ENCODER.to_string()
}

fn default_generation_model() -> String {
    DEFAULT_GENERATION_MODEL.to_string()
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::Mock {
            dim: default_mock_dim(),
            seed: default_mock_seed(),
        }
    }
}

impl EncoderSpec {
    pub fn build(&self) -> Box<dyn Encoder> {
        match self {
            EncoderSpec::Mock { dim, seed } => Box::new(MockEncoder::new(*dim, *seed)),
            EncoderSpec::Remote { model, dim, endpoint } => Box::new(RemoteEncoder {
                endpoint: endpoint.clone(),
                model: model.clone(),
                dim: *dim,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnalysisSpec {
    Scripted(StubScript),
    Remote {
        #[serde(default = "default_generation_model")]
        model: String,
        #[serde(default)]
        temperature: f64,
        #[serde(default)]
        seed: Option<u64>,
        #[serde(flatten)]
        endpoint: Endpoint,
    },
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        AnalysisSpec::Scripted(StubScript::default())
    }
}

impl AnalysisSpec {
    pub fn build(&self) -> Box<dyn JudgmentBackend> {
        match self {
            AnalysisSpec::Scripted(script) => Box::new(ScriptedStub::new(script.clone())),
            AnalysisSpec::Remote {
                model,
                temperature,
                seed,
                endpoint,
            } => Box::new(RemoteJudge {
                client: ChatClient {
                    endpoint: endpoint.clone(),
                    model: model.clone(),
                    temperature: *temperature,
                    seed: *seed,
                },
            }),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GenerationSpec {
    #[default]
    Copy,
    Fixed {
        text: String,
    },
    Remote {
        #[serde(default = "default_generation_model")]
        model: String,
        #[serde(default)]
        temperature: f64,
        #[serde(default)]
        seed: Option<u64>,
        #[serde(flatten)]
        endpoint: Endpoint,
    },
}

impl GenerationSpec {
    pub fn build(&self) -> Box<dyn Translator> {
        match self {
            GenerationSpec::Copy => Box::new(CopyStub),
            GenerationSpec::Fixed { text } => Box::new(FixedStub(text.clone())),
            GenerationSpec::Remote {
                model,
                temperature,
                seed,
                endpoint,
            } => Box::new(RemoteTranslator {
                client: ChatClient {
                    endpoint: endpoint.clone(),
                    model: model.clone(),
                    temperature: *temperature,
                    seed: *seed,
                },
            }),
        }
    }
}

/// Which sentences and sizes the case comparison covers. Empty `ids` means the
/// first two test sentences; empty `sizes` means {0, 200, 2000} where swept,
/// falling back to every swept size.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaseSpec {
    pub ids: Vec<String>,
    pub sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub sizes: Vec<usize>,
    pub template_version: String,
    pub smoothing_epsilon: f64,
    pub bare_baseline: bool,
    pub max_concurrency: usize,
    pub retriever: RetrieverConfig,
    pub encoder: EncoderSpec,
    pub analysis: AnalysisSpec,
    pub generation: GenerationSpec,
    pub retry: RetryPolicy,
    pub cases: CaseSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            sizes: DEFAULT_SIZES.to_vec(),
            template_version: crate::promptgen::DEFAULT_TEMPLATE_VERSION.to_string(),
            smoothing_epsilon: crate::bleu::DEFAULT_EPSILON,
            bare_baseline: false,
            max_concurrency: 4,
            retriever: RetrieverConfig::default(),
            encoder: EncoderSpec::default(),
            analysis: AnalysisSpec::default(),
            generation: GenerationSpec::default(),
            retry: RetryPolicy::default(),
            cases: CaseSpec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.retriever.k == 0 {
            return Err(ConfigError::Invalid("retriever.k must be at least 1".into()));
        }
        if self.max_concurrency == 0 {
            return Err(ConfigError::Invalid("max_concurrency must be at least 1".into()));
        }
        if !(self.smoothing_epsilon > 0.0 && self.smoothing_epsilon <= 1.0) {
            return Err(ConfigError::Invalid("smoothing_epsilon must be in (0, 1]".into()));
        }
        if self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ConfigError::Invalid("sizes must be strictly ascending".into()));
        }
        if let EncoderSpec::Mock { dim: 0, .. } = self.encoder {
            return Err(ConfigError::Invalid("encoder.dim must be at least 1".into()));
        }
        Ok(())
    }

    /// Canonical JSON used for hashing and for echoing into artifacts.
    pub fn canonical_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hash_value(&self.canonical_json())
    }

    /// Snapshot for one sweep condition: the full config plus the knowledge-base
    /// size actually used.
    pub fn condition_snapshot(&self, kb_size: usize) -> serde_json::Value {
        serde_json::json!({ "pipeline": self.canonical_json(), "kb_size": kb_size })
    }
}

pub fn hash_value(value: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(value).expect("value serializes");
    hex(&Sha256::digest(&bytes))
}

/// Paths of leaf values that differ between two JSON documents.
pub fn json_diff(a: &serde_json::Value, b: &serde_json::Value) -> Vec<String> {
    fn walk(a: &serde_json::Value, b: &serde_json::Value, path: &str, out: &mut Vec<String>) {
        use serde_json::Value;
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                for k in keys {
                    let p = if path.is_empty() {
                        k.clone()
                    } else {
                        format!("{path}.{k}")
                    };
                    match (x.get(k), y.get(k)) {
                        (Some(l), Some(r)) => walk(l, r, &p, out),
                        _ => out.push(p),
                    }
                }
            }
            (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
                for (i, (l, r)) in x.iter().zip(y).enumerate() {
                    walk(l, r, &format!("{path}[{i}]"), out);
                }
            }
            _ if a == b => {}
            _ => out.push(path.to_string()),
        }
    }
    let mut out = Vec::new();
    walk(a, b, "", &mut out);
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub kb: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub embedding_cache: Option<PathBuf>,
    pub index: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceSettings {
    pub bind: String,
    pub sessions_dir: PathBuf,
    pub static_dir: Option<PathBuf>,
    /// Knowledge-base size the service retrieves from; `None` uses all of it.
    pub kb_size: Option<usize>,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        ServiceSettings {
            bind: "127.0.0.1:8080".into(),
            sessions_dir: PathBuf::from("sessions"),
            static_dir: None,
            kb_size: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub paths: Paths,
    pub pipeline: PipelineConfig,
    pub service: ServiceSettings,
}

impl FileConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: FileConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.pipeline.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| ConfigError::Read {
                path: p.display().to_string(),
                message: e.to_string(),
            })?,
            None => String::new(),
        };
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        // relative paths in a config file are relative to that file
        if let Some(base) = path.and_then(Path::parent) {
            let fix = |p: &mut Option<PathBuf>| {
                if let Some(inner) = p.as_mut() {
                    if inner.is_relative() {
                        *inner = base.join(&*inner);
                    }
                }
            };
            fix(&mut cfg.paths.kb);
            fix(&mut cfg.paths.test);
            fix(&mut cfg.paths.out);
            fix(&mut cfg.paths.embedding_cache);
            fix(&mut cfg.paths.index);
            if cfg.service.sessions_dir.is_relative() {
                cfg.service.sessions_dir = base.join(&cfg.service.sessions_dir);
            }
            let mut static_dir = cfg.service.static_dir.take();
            fix(&mut static_dir);
            cfg.service.static_dir = static_dir;
        }
        Ok(cfg)
    }
}

/// Applies `a.b.c=value`; the value is parsed as TOML and falls back to a
/// plain string.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::BadOverride(spec.to_string()));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| ConfigError::BadOverride(format!("{spec}: `{part}` is not inside a table")))?;
        if i == parts.len() - 1 {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    unreachable!("split always yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = FileConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(cfg.pipeline, PipelineConfig::default());
        assert_eq!(cfg.pipeline.retriever.k, 5);
        assert_eq!(cfg.pipeline.sizes, DEFAULT_SIZES);
    }

    #[test]
    fn parses_backends_and_overrides() {
        let text = r#"
[paths]
kb = "kb.jsonl"
[pipeline]
seed = 3
encoder = { kind = "remote", model = "text-embedding-ada-002", base_url = "http://localhost:9" }
generation = { kind = "fixed", text = "你好" }
[pipeline.analysis]
kind = "scripted"
a1_default = "ANSWER: OUTER"
[pipeline.analysis.sentences."さんまを焼く男"]
a1 = "ANSWER: INNER"
"#;
        let cfg = FileConfig::from_toml_str(
            text,
            &["pipeline.retriever.k=3".into(), "pipeline.bare_baseline=true".into()],
        )
        .unwrap();
        assert_eq!(cfg.pipeline.seed, 3);
        assert_eq!(cfg.pipeline.retriever.k, 3);
        assert!(cfg.pipeline.bare_baseline);
        assert!(matches!(cfg.pipeline.generation, GenerationSpec::Fixed { ref text } if text == "你好"));
        match &cfg.pipeline.encoder {
            EncoderSpec::Remote { endpoint, model, .. } => {
                assert_eq!(endpoint.base_url, "http://localhost:9");
                assert_eq!(endpoint.api_key_env, "OPENAI_API_KEY");
                assert_eq!(model, "text-embedding-ada-002");
            }
            other => panic!("{other:?}"),
        }
        match &cfg.pipeline.analysis {
            AnalysisSpec::Scripted(s) => {
                assert_eq!(s.a1_default, "ANSWER: OUTER");
                assert_eq!(s.a2_default, "ANSWER: NONE");
                assert!(s.sentences.contains_key("さんまを焼く男"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_values() {
        assert!(FileConfig::from_toml_str("[pipeline]\nsizes = [0, 200, 100]", &[]).is_err());
        assert!(FileConfig::from_toml_str("", &["pipeline.retriever.k=0".into()]).is_err());
        assert!(matches!(
            FileConfig::from_toml_str("", &["nonsense".into()]),
            Err(ConfigError::BadOverride(_))
        ));
        assert!(FileConfig::from_toml_str(
            "[pipeline]\nunknown_kind = { kind = 1 }\nencoder = { kind = \"laser\" }",
            &[]
        )
        .is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn snapshots_differ_only_in_size() {
        let cfg = PipelineConfig::default();
        let diff = json_diff(&cfg.condition_snapshot(0), &cfg.condition_snapshot(200));
        assert_eq!(diff, ["kb_size"]);
        let mut other = cfg.clone();
        other.retriever.k = 3;
        let diff = json_diff(&cfg.condition_snapshot(0), &other.condition_snapshot(0));
        assert_eq!(diff, ["pipeline.retriever.k"]);
    }

    #[test]
    fn string_override_fallback() {
        let mut v: toml::Value = toml::from_str("").unwrap();
        apply_override(&mut v, "pipeline.template_version=v1").unwrap();
        assert_eq!(v["pipeline"]["template_version"].as_str(), Some("v1"));
    }
}
