//! Translation generation backends and the append-only run log.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::AnalysisResult;
use crate::llm::{with_retries, BackendError, ChatClient, RetryExhausted, RetryPolicy};
use crate::promptgen::EnhancedPrompt;
use crate::retrieval::RetrievalHit;

/// What the copy stub answers when the prompt carries no example line.
pub const COPY_STUB_FALLBACK: &str = "无参考";

const EMPTY_OUTPUT: &str = "empty output";

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("backend returned empty output after {attempts} attempt(s)")]
    EmptyOutput { attempts: usize },
    #[error("generation failed: {0}")]
    Backend(#[from] RetryExhausted),
    #[error("run log: {0}")]
    Log(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl Default for DecodingParams {
    fn default() -> Self {
        DecodingParams {
            temperature: 0.0,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: String,
    pub model_id: String,
    pub params: DecodingParams,
}

pub trait Translator: Send + Sync {
    fn descriptor(&self) -> BackendDescriptor;

    fn generate(&self, prompt: &str) -> Result<String, BackendError>;
}

/// Echoes the target side of the first example line in the prompt.
#[derive(Debug, Clone, Copy, Default)]
pub struct CopyStub;

impl CopyStub {
    pub fn answer(prompt: &str) -> String {
        prompt
            .lines()
            .filter(|l| l.starts_with("(JP)"))
            .find_map(|l| l.split_once(" → (ZH)").map(|(_, zh)| zh.to_string()))
            .unwrap_or_else(|| COPY_STUB_FALLBACK.to_string())
    }
}

impl Translator for CopyStub {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            kind: "copy-stub".into(),
            model_id: "copy-stub".into(),
            params: DecodingParams::default(),
        }
    }

    fn generate(&self, prompt: &str) -> Result<String, BackendError> {
        Ok(Self::answer(prompt))
    }
}

/// Returns the same text for every prompt.
#[derive(Debug, Clone)]
pub struct FixedStub(pub String);

impl Translator for FixedStub {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            kind: "fixed-stub".into(),
            model_id: format!("fixed-stub:{}", self.0),
            params: DecodingParams::default(),
        }
    }

    fn generate(&self, _prompt: &str) -> Result<String, BackendError> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone)]
pub struct RemoteTranslator {
    pub client: ChatClient,
}

impl Translator for RemoteTranslator {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            kind: "remote-llm".into(),
            model_id: self.client.model.clone(),
            params: DecodingParams {
                temperature: self.client.temperature,
                seed: self.client.seed,
            },
        }
    }

    fn generate(&self, prompt: &str) -> Result<String, BackendError> {
        self.client.complete(prompt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationRecord {
    pub test_id: String,
    pub prompt: EnhancedPrompt,
    pub output_zh: String,
    pub raw_response: String,
    pub backend: BackendDescriptor,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

/// Sends the rendered prompt and returns the trimmed output. Empty outputs count
/// as failed attempts and are retried like transport errors.
pub fn translate(
    test_id: &str,
    prompt: &EnhancedPrompt,
    backend: &dyn Translator,
    retry: RetryPolicy,
) -> Result<TranslationRecord, GenerationError> {
    let started = Instant::now();
    let result = with_retries(retry, || {
        let raw = backend.generate(&prompt.rendered)?;
        if raw.trim().is_empty() {
            Err(BackendError::Transport(EMPTY_OUTPUT.into()))
        } else {
            Ok(raw)
        }
    });
    let (raw, attempts) = match result {
        Ok(v) => v,
        Err(e) if e.last == BackendError::Transport(EMPTY_OUTPUT.into()) => {
            return Err(GenerationError::EmptyOutput {
                attempts: e.attempts.len(),
            })
        }
        Err(e) => return Err(e.into()),
    };
    Ok(TranslationRecord {
        test_id: test_id.to_string(),
        prompt: prompt.clone(),
        output_zh: raw.trim().to_string(),
        raw_response: raw,
        backend: backend.descriptor(),
        latency_ms: started.elapsed().as_millis() as u64,
        attempt_count: attempts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedRecord {
    pub test_id: String,
    pub size: usize,
    pub config_hash: String,
    pub analysis: AnalysisResult,
    pub hits: Vec<RetrievalHit>,
    pub record: TranslationRecord,
}

type LogKey = (String, usize, String);

/// Append-only JSONL log of translation records, reloadable so interrupted runs
/// can resume without calling the backend again.
pub struct RunLog {
    path: PathBuf,
    sink: Mutex<File>,
    known: Mutex<HashMap<LogKey, LoggedRecord>>,
}

impl RunLog {
    pub fn open(path: &Path) -> Result<Self, GenerationError> {
        let err = |e: std::io::Error| GenerationError::Log(format!("{}: {e}", path.display()));
        let mut known = HashMap::new();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(path).map_err(err)?).lines().enumerate() {
                let line = line.map_err(err)?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<LoggedRecord>(&line) {
                    Ok(r) => {
                        known.insert((r.test_id.clone(), r.size, r.config_hash.clone()), r);
                    }
                    Err(e) => log::warn!("{}:{}: skipping run-log line: {e}", path.display(), i + 1),
                }
            }
        } else if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(err)?;
        }
        let sink = OpenOptions::new().create(true).append(true).open(path).map_err(err)?;
        Ok(RunLog {
            path: path.to_path_buf(),
            sink: Mutex::new(sink),
            known: Mutex::new(known),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn lookup(&self, test_id: &str, size: usize, config_hash: &str) -> Option<LoggedRecord> {
        self.known
            .lock()
            .expect("run log lock")
            .get(&(test_id.to_string(), size, config_hash.to_string()))
            .cloned()
    }

    pub fn append(&self, entry: &LoggedRecord) -> Result<(), GenerationError> {
        let mut line = serde_json::to_vec(&entry).map_err(|e| GenerationError::Log(e.to_string()))?;
        line.push(b'\n');
        {
            let mut sink = self.sink.lock().expect("run log lock");
            sink.write_all(&line).map_err(|e| GenerationError::Log(e.to_string()))?;
            sink.flush().map_err(|e| GenerationError::Log(e.to_string()))?;
        }
        self.known.lock().expect("run log lock").insert(
            (entry.test_id.clone(), entry.size, entry.config_hash.clone()),
            entry.clone(),
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.known.lock().expect("run log lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
