//! Remote model access over OpenAI-compatible HTTP endpoints, plus the bounded
//! retry loop shared by every backend.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("backend refused: {0}")]
    Refused(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
}

impl BackendError {
    /// Transport errors are retried; the rest fail immediately.
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            backoff_ms: 500,
        }
    }
}

/// A call that still failed after every permitted attempt.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{} attempt(s) failed; last error: {}", .attempts.len(), .last)]
pub struct RetryExhausted {
    pub attempts: Vec<String>,
    pub last: BackendError,
}

/// Runs `call` until it succeeds, fails with a non-retryable error, or the
/// policy runs out. Returns the value and the number of attempts used.
pub fn with_retries<T>(
    policy: RetryPolicy,
    mut call: impl FnMut() -> Result<T, BackendError>,
) -> Result<(T, u32), RetryExhausted> {
    let mut attempts = Vec::new();
    let mut attempt = 0u32;
    loop {
        attempt += 1;
        match call() {
            Ok(v) => return Ok((v, attempt)),
            Err(e) => {
                attempts.push(format!("attempt {attempt}: {e}"));
                if !e.is_retryable() || attempt > policy.max_retries {
                    return Err(RetryExhausted { attempts, last: e });
                }
                if policy.backoff_ms > 0 {
                    let factor = 1u64 << (attempt - 1).min(6);
                    std::thread::sleep(Duration::from_millis(policy.backoff_ms * factor));
                }
            }
        }
    }
}

pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";
pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";

fn default_base_url() -> String {
    DEFAULT_BASE_URL.to_string()
}

fn default_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}

fn default_timeout() -> u64 {
    120
}

/// Connection settings for a remote endpoint. The credential itself is read
/// from the named environment variable at call time and never serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoint {
    #[serde(default = "default_base_url")]
    pub base_url: String,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

impl Default for Endpoint {
    fn default() -> Self {
        Endpoint {
            base_url: default_base_url(),
            api_key_env: default_key_env(),
            timeout_secs: default_timeout(),
        }
    }
}

impl Endpoint {
    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(self.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into()
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), path)
    }

    fn post_json(&self, path: &str, body: &serde_json::Value) -> Result<serde_json::Value, BackendError> {
        let key = std::env::var(&self.api_key_env).unwrap_or_default();
        let mut req = self.agent().post(&self.url(path));
        if !key.is_empty() {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        match status {
            200..=299 => {
                serde_json::from_str(&text).map_err(|e| BackendError::Transport(format!("invalid JSON body: {e}")))
            }
            // rate limits and server errors are worth another try
            408 | 429 | 500..=599 => Err(BackendError::Transport(format!("HTTP {status}: {text}"))),
            _ => Err(BackendError::Refused(format!("HTTP {status}: {text}"))),
        }
    }
}

/// Chat-completion client; one user message in, the first choice's text out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatClient {
    #[serde(flatten)]
    pub endpoint: Endpoint,
    pub model: String,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl ChatClient {
    pub fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let mut body = serde_json::json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": prompt}],
        });
        if let Some(seed) = self.seed {
            body["seed"] = seed.into();
        }
        let value = self.endpoint.post_json("chat/completions", &body)?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Transport("response has no choices[0].message.content".into()))
    }
}

/// Embedding endpoint client.
pub fn remote_embedding(endpoint: &Endpoint, model: &str, text: &str) -> Result<Vec<f64>, BackendError> {
    let body = serde_json::json!({ "model": model, "input": text });
    let value = endpoint.post_json("embeddings", &body)?;
    let arr = value["data"][0]["embedding"]
        .as_array()
        .ok_or_else(|| BackendError::Transport("response has no data[0].embedding".into()))?;
    arr.iter()
        .map(|v| {
            v.as_f64()
                .ok_or_else(|| BackendError::Transport("non-numeric embedding component".into()))
        })
        .collect()
}
