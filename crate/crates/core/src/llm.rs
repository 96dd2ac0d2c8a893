//! Completion backends: an OpenAI-compatible HTTP client, a replay backend
//! reading recorded completions, and a content-addressed cache wrapper.
//!
//! Recorded completions are one JSON file per sample at
//! `<dir>/<key[0..2]>/<key>.json`, where `key = cache_key(prompt, params, index)`.
//! The same layout serves as cache and as replay fixtures.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::{Prompt, Role};

pub const ENV_API_BASE: &str = "TA_LIFT_API_BASE";
pub const ENV_API_KEY: &str = "TA_LIFT_API_KEY";
pub const ENV_MODEL: &str = "TA_LIFT_MODEL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub model: String,
    pub temperature: f64,
    pub n_samples: u32,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams { model: "gpt-4-turbo".into(), temperature: 0.8, n_samples: 50, max_tokens: 2048, seed: None }
    }
}

impl GenerationParams {
    pub fn check(&self) -> Result<(), LlmError> {
        if self.n_samples == 0 {
            return Err(LlmError::InvalidParams("n_samples must be at least 1".into()));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidParams("max_tokens must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LlmError::InvalidParams(format!("temperature {} is not a non-negative number", self.temperature)));
        }
        Ok(())
    }

    /// Parameters that identify a sample. `n_samples` is left out so that
    /// sample `i` is the same record whatever the batch size.
    fn identity(&self) -> Value {
        json!({
            "model": self.model,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "seed": self.seed,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub backend_id: String,
    pub cached: bool,
    pub usage: Option<Usage>,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("backend returned status {status}: {body}")]
    Backend { status: u16, body: String },
    #[error("no recorded completion for prompt {0}")]
    ReplayMiss(String),
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("missing configuration: {0}")]
    Config(String),
    #[error("cache error at {path}: {reason}")]
    Cache { path: PathBuf, reason: String },
}

pub trait Backend: Send + Sync {
    fn id(&self) -> String;

    /// Returns exactly `params.n_samples` completions.
    fn complete(&self, prompt: &Prompt, params: &GenerationParams) -> Result<Vec<Completion>, LlmError>;
}

/// Content hash of one sample request. Keys are computed over a canonical
/// JSON document (object keys sorted, no whitespace).
pub fn cache_key(prompt: &Prompt, params: &GenerationParams, index: u32) -> String {
    let doc = json!({
        "messages": serde_json::to_value(&prompt.messages).expect("messages serialize"),
        "params": params.identity(),
        "index": index,
    });
    hex::encode(Sha256::digest(canonical_json(&doc).as_bytes()))
}

/// Serializes with object keys in sorted order, independent of how the value
/// was built.
pub fn canonical_json(v: &Value) -> String {
    fn sort(v: &Value) -> Value {
        match v {
            Value::Object(map) => {
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                let mut out = serde_json::Map::new();
                for k in keys {
                    out.insert(k.clone(), sort(&map[k]));
                }
                Value::Object(out)
            }
            Value::Array(items) => Value::Array(items.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    sort(v).to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub fingerprint: String,
    pub params: GenerationParams,
    pub index: u32,
    pub completions: Vec<String>,
}

/// File-per-key store of [`SampleRecord`]s.
#[derive(Debug, Clone)]
pub struct RecordStore {
    root: PathBuf,
}

impl RecordStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RecordStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.root.join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn load(&self, key: &str) -> Result<Option<SampleRecord>, LlmError> {
        let path = self.path_for(key);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(LlmError::Cache { path, reason: e.to_string() }),
        };
        serde_json::from_str(&text).map(Some).map_err(|e| LlmError::Cache { path, reason: e.to_string() })
    }

    /// Writes through a temporary file and renames it into place, so readers
    /// never observe a partial record.
    pub fn store(&self, key: &str, record: &SampleRecord) -> Result<(), LlmError> {
        let path = self.path_for(key);
        let dir = path.parent().expect("record path has a parent");
        let err = |e: &dyn std::fmt::Display| LlmError::Cache { path: path.clone(), reason: e.to_string() };
        fs::create_dir_all(dir).map_err(|e| err(&e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| err(&e))?;
        let body = serde_json::to_string_pretty(record).map_err(|e| err(&e))?;
        tmp.write_all(body.as_bytes()).map_err(|e| err(&e))?;
        tmp.write_all(b"\n").map_err(|e| err(&e))?;
        tmp.persist(&path).map_err(|e| err(&e.error))?;
        Ok(())
    }

    /// Records `texts` as samples `0..texts.len()` of `prompt`.
    pub fn record(&self, prompt: &Prompt, params: &GenerationParams, texts: &[String]) -> Result<(), LlmError> {
        for (i, text) in texts.iter().enumerate() {
            let index = i as u32;
            let record = SampleRecord {
                fingerprint: prompt.fingerprint.clone(),
                params: params.clone(),
                index,
                completions: vec![text.clone()],
            };
            self.store(&cache_key(prompt, params, index), &record)?;
        }
        Ok(())
    }
}

/// Serves recorded completions and fails on any miss.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    store: RecordStore,
}

impl ReplayBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ReplayBackend { store: RecordStore::new(dir) }
    }
}

impl Backend for ReplayBackend {
    fn id(&self) -> String {
        "replay".into()
    }

    fn complete(&self, prompt: &Prompt, params: &GenerationParams) -> Result<Vec<Completion>, LlmError> {
        params.check()?;
        (0..params.n_samples)
            .map(|i| {
                let record = self
                    .store
                    .load(&cache_key(prompt, params, i))?
                    .ok_or_else(|| LlmError::ReplayMiss(prompt.fingerprint.clone()))?;
                let text = record.completions.into_iter().next().unwrap_or_default();
                Ok(Completion { text, backend_id: self.id(), cached: false, usage: None })
            })
            .collect()
    }
}

/// Returns stored completions when every requested sample is present,
/// otherwise delegates the whole request and stores the result.
pub struct CacheBackend<B> {
    inner: B,
    store: RecordStore,
}

impl<B: Backend> CacheBackend<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>) -> Self {
        CacheBackend { inner, store: RecordStore::new(dir) }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: Backend> Backend for CacheBackend<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn complete(&self, prompt: &Prompt, params: &GenerationParams) -> Result<Vec<Completion>, LlmError> {
        params.check()?;
        let keys: Vec<String> = (0..params.n_samples).map(|i| cache_key(prompt, params, i)).collect();
        let mut hits = Vec::with_capacity(keys.len());
        for key in &keys {
            match self.store.load(key)? {
                Some(r) => hits.push(Completion {
                    text: r.completions.into_iter().next().unwrap_or_default(),
                    backend_id: self.inner.id(),
                    cached: true,
                    usage: None,
                }),
                None => break,
            }
        }
        if hits.len() == keys.len() {
            return Ok(hits);
        }
        let fresh = self.inner.complete(prompt, params)?;
        let texts: Vec<String> = fresh.iter().map(|c| c.text.clone()).collect();
        self.store.record(prompt, params, &texts)?;
        Ok(fresh)
    }
}

/// Counting semaphore bounding concurrent HTTP requests.
struct Inflight {
    slots: Mutex<usize>,
    freed: Condvar,
}

impl Inflight {
    fn acquire(&self) {
        let mut free = self.slots.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.freed.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
    }

    fn release(&self) {
        *self.slots.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.freed.notify_one();
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub api_base: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_inflight: usize,
    pub attempts: u32,
    pub backoff: Duration,
}

impl HttpConfig {
    pub fn new(api_base: impl Into<String>) -> Self {
        HttpConfig {
            api_base: api_base.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            max_inflight: 4,
            attempts: 3,
            backoff: Duration::from_millis(500),
        }
    }

    /// Reads the endpoint and key from the environment.
    pub fn from_env() -> Result<Self, LlmError> {
        let base = std::env::var(ENV_API_BASE).map_err(|_| LlmError::Config(format!("{ENV_API_BASE} is not set")))?;
        let mut cfg = HttpConfig::new(base);
        cfg.api_key = std::env::var(ENV_API_KEY).ok();
        Ok(cfg)
    }
}

/// Chat-completions client. One request per call, asking for `n` choices.
pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
    inflight: Inflight,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let slots = config.max_inflight.max(1);
        HttpBackend { config, agent, inflight: Inflight { slots: Mutex::new(slots), freed: Condvar::new() } }
    }

    fn request_body(prompt: &Prompt, params: &GenerationParams) -> Value {
        let messages: Vec<Value> = prompt
            .messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                };
                json!({"role": role, "content": m.text})
            })
            .collect();
        let mut body = json!({
            "model": params.model,
            "messages": messages,
            "n": params.n_samples,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn attempt(&self, body: &Value) -> Result<Value, LlmError> {
        let url = format!("{}/chat/completions", self.config.api_base.trim_end_matches('/'));
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(canonical_json(body).as_bytes()).map_err(|e| match e {
            ureq::Error::Timeout(_) => LlmError::Timeout,
            other => LlmError::Transport(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| LlmError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            let body: String = text.chars().take(300).collect();
            return Err(LlmError::Backend { status, body });
        }
        serde_json::from_str(&text).map_err(|e| LlmError::Transport(format!("malformed response: {e}")))
    }

    fn retryable(e: &LlmError) -> bool {
        match e {
            LlmError::Backend { status, .. } => *status == 429 || *status >= 500,
            LlmError::Timeout | LlmError::Transport(_) => true,
            _ => false,
        }
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}", self.config.api_base)
    }

    fn complete(&self, prompt: &Prompt, params: &GenerationParams) -> Result<Vec<Completion>, LlmError> {
        params.check()?;
        let body = Self::request_body(prompt, params);
        self.inflight.acquire();
        let mut result = self.attempt(&body);
        let mut delay = self.config.backoff;
        for _ in 1..self.config.attempts.max(1) {
            match &result {
                Err(e) if Self::retryable(e) => {
                    std::thread::sleep(delay);
                    delay *= 2;
                    result = self.attempt(&body);
                }
                _ => break,
            }
        }
        self.inflight.release();
        let value = result?;

        let usage = value.get("usage").and_then(|u| {
            Some(Usage {
                prompt_tokens: u.get("prompt_tokens")?.as_u64()?,
                completion_tokens: u.get("completion_tokens")?.as_u64()?,
            })
        });
        let choices = value
            .get("choices")
            .and_then(Value::as_array)
            .ok_or_else(|| LlmError::Transport("response has no choices".into()))?;
        let out: Vec<Completion> = choices
            .iter()
            .map(|c| Completion {
                text: c.pointer("/message/content").and_then(Value::as_str).unwrap_or_default().to_string(),
                backend_id: self.id(),
                cached: false,
                usage,
            })
            .collect();
        if out.len() != params.n_samples as usize {
            return Err(LlmError::Transport(format!(
                "asked for {} choices, received {}",
                params.n_samples,
                out.len()
            )));
        }
        Ok(out)
    }
}
