//! Uniform client for text-generation backends.
//!
//! Every prompt-driven stage goes through [`GenClient`]: it adds retry with
//! exponential backoff, content-addressed response caching, an audit log,
//! and a bound on concurrently issued requests. Backends only implement
//! [`TextBackend`].

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Sampling configuration. `temperature = 0` makes the effective sample
/// diversity 1 regardless of `n_samples`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub min_p: f64,
    pub max_new_tokens: u32,
    pub n_samples: u32,
    pub thinking_mode: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_p: 0.8,
            min_p: 0.0,
            max_new_tokens: 4096,
            n_samples: 1,
            thinking_mode: false,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature < 0.0 {
            return Err(Error::Config("temperature must be >= 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config("top_p must be in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.min_p) {
            return Err(Error::Config("min_p must be in [0, 1)".into()));
        }
        if self.n_samples < 1 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        Ok(())
    }

    /// Stable content fingerprint: field order in the struct or any JSON
    /// representation does not affect it.
    pub fn fingerprint(&self) -> String {
        let canonical = format!(
            "max_new_tokens={};min_p={};n_samples={};temperature={};thinking_mode={};top_p={}",
            self.max_new_tokens, self.min_p, self.n_samples, self.temperature, self.thinking_mode, self.top_p
        );
        hex::encode(Sha256::digest(canonical.as_bytes()))[..16].to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub text: String,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        Self { role: Role::System, text: text.into() }
    }
    pub fn user(text: impl Into<String>) -> Self {
        Self { role: Role::User, text: text.into() }
    }
    pub fn assistant(text: impl Into<String>) -> Self {
        Self { role: Role::Assistant, text: text.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub config: GenerationConfig,
    pub cache_key_salt: Option<String>,
}

impl ChatRequest {
    pub fn new(
        messages: Vec<ChatMessage>,
        config: GenerationConfig,
        cache_key_salt: Option<String>,
    ) -> Result<Self> {
        if messages.is_empty() {
            return Err(Error::InvalidArgument("chat request needs at least one message".into()));
        }
        if messages.last().map(|m| m.role) != Some(Role::User) {
            return Err(Error::InvalidArgument("last chat message must have role user".into()));
        }
        config.validate()?;
        Ok(Self { messages, config, cache_key_salt })
    }

    /// Request fingerprint covering messages, config, and salt.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for m in &self.messages {
            hasher.update(match m.role {
                Role::System => b"S:".as_slice(),
                Role::User => b"U:",
                Role::Assistant => b"A:",
            });
            hasher.update((m.text.len() as u64).to_le_bytes());
            hasher.update(m.text.as_bytes());
        }
        hasher.update(self.config.fingerprint().as_bytes());
        if let Some(salt) = &self.cache_key_salt {
            hasher.update(b"salt:");
            hasher.update(salt.as_bytes());
        }
        hex::encode(hasher.finalize())[..32].to_string()
    }

    /// Cache key for one sample slot of this request.
    pub fn cache_key(&self, sample_index: u32) -> String {
        format!("{}-{sample_index:04}", self.fingerprint())
    }
}

/// A text-generation backend: remote service, local model, or scripted
/// stand-in. Implementations return exactly `n_samples` completions.
pub trait TextBackend: Send + Sync {
    fn name(&self) -> &str;
    fn generate(&self, request: &ChatRequest) -> Result<Vec<String>>;
    /// Whether the serving stack honors min_p; when false the client notes
    /// "min_p ignored" in its audit trail instead of failing.
    fn honors_min_p(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    QwenFamily,
    LlamaFamily,
}

impl std::fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelFamily::QwenFamily => write!(f, "qwen_family"),
            ModelFamily::LlamaFamily => write!(f, "llama_family"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetMode {
    AnswerOnly,
    Reasoning,
    LlamaDefault,
}

/// Published sampling presets per (family, mode).
pub fn preset_config(family: ModelFamily, mode: PresetMode) -> Result<GenerationConfig> {
    let base = GenerationConfig::default();
    match (family, mode) {
        (ModelFamily::QwenFamily, PresetMode::AnswerOnly) => Ok(GenerationConfig {
            temperature: 0.7,
            top_p: 0.8,
            min_p: 0.0,
            thinking_mode: false,
            ..base
        }),
        (ModelFamily::QwenFamily, PresetMode::Reasoning) => Ok(GenerationConfig {
            temperature: 0.6,
            top_p: 0.95,
            min_p: 0.2,
            thinking_mode: true,
            ..base
        }),
        (ModelFamily::LlamaFamily, PresetMode::LlamaDefault) => Ok(GenerationConfig {
            temperature: 0.6,
            top_p: 0.9,
            min_p: 0.0,
            thinking_mode: false,
            ..base
        }),
        (family, mode) => Err(Error::Config(format!(
            "no preset for ({family}, {mode:?}); known presets: (qwen_family, answer_only), \
             (qwen_family, reasoning), (llama_family, llama_default)"
        ))),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub backoff_multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, initial_backoff_ms: 250, backoff_multiplier: 2.0 }
    }
}

impl RetryPolicy {
    /// No waiting between attempts; used by tests and scripted runs.
    pub fn immediate(max_attempts: u32) -> Self {
        Self { max_attempts, initial_backoff_ms: 0, backoff_multiplier: 1.0 }
    }
}

// Counting semaphore bounding in-flight backend calls.
struct InflightGate {
    available: Mutex<usize>,
    cv: Condvar,
}

impl InflightGate {
    fn new(limit: usize) -> Self {
        Self { available: Mutex::new(limit.max(1)), cv: Condvar::new() }
    }
    fn acquire(&self) {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.cv.wait(n).unwrap();
        }
        *n -= 1;
    }
    fn release(&self) {
        *self.available.lock().unwrap() += 1;
        self.cv.notify_one();
    }
}

#[derive(Debug, Serialize)]
struct AuditRow {
    fingerprint: String,
    backend: String,
    cache_hit: bool,
    attempts: u32,
    n_samples: u32,
    min_p_ignored: bool,
    timestamp: String,
}

/// Client wrapping a backend with caching, retries, and audit logging.
pub struct GenClient {
    backend: Box<dyn TextBackend>,
    cache_dir: Option<PathBuf>,
    audit_log: Option<Mutex<std::fs::File>>,
    retry: RetryPolicy,
    gate: InflightGate,
    bypass_cache: bool,
    mem_cache: Mutex<HashMap<String, String>>,
    backend_calls: AtomicU64,
}

impl GenClient {
    pub fn new(backend: Box<dyn TextBackend>, cache_dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = cache_dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            backend,
            cache_dir: Some(dir),
            audit_log: None,
            retry: RetryPolicy::default(),
            gate: InflightGate::new(8),
            bypass_cache: false,
            mem_cache: Mutex::new(HashMap::new()),
            backend_calls: AtomicU64::new(0),
        })
    }

    /// Client with a process-local cache only; used in tests and examples.
    pub fn in_memory(backend: Box<dyn TextBackend>) -> Self {
        Self {
            backend,
            cache_dir: None,
            audit_log: None,
            retry: RetryPolicy::immediate(3),
            gate: InflightGate::new(8),
            bypass_cache: false,
            mem_cache: Mutex::new(HashMap::new()),
            backend_calls: AtomicU64::new(0),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_inflight_limit(mut self, limit: usize) -> Self {
        self.gate = InflightGate::new(limit);
        self
    }

    /// Explicit cache invalidation: subsequent calls go to the backend and
    /// overwrite cached entries.
    pub fn with_cache_bypass(mut self, bypass: bool) -> Self {
        self.bypass_cache = bypass;
        self
    }

    pub fn with_audit_log(mut self, path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        self.audit_log = Some(Mutex::new(file));
        Ok(self)
    }

    /// Total calls issued to the underlying backend (cache misses only).
    pub fn backend_call_count(&self) -> u64 {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    fn cache_read(&self, key: &str) -> Option<String> {
        if self.bypass_cache {
            return None;
        }
        if let Some(text) = self.mem_cache.lock().unwrap().get(key) {
            return Some(text.clone());
        }
        let dir = self.cache_dir.as_ref()?;
        std::fs::read_to_string(dir.join(key)).ok()
    }

    fn cache_write(&self, key: &str, text: &str) -> Result<()> {
        self.mem_cache.lock().unwrap().insert(key.to_string(), text.to_string());
        if let Some(dir) = &self.cache_dir {
            // write-temp-then-rename keeps readers from seeing partial files
            let tmp = dir.join(format!("{key}.tmp"));
            let dst = dir.join(key);
            std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
            std::fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))?;
        }
        Ok(())
    }

    fn audit(&self, request: &ChatRequest, cache_hit: bool, attempts: u32) {
        let Some(log) = &self.audit_log else { return };
        let row = AuditRow {
            fingerprint: request.fingerprint(),
            backend: self.backend.name().to_string(),
            cache_hit,
            attempts,
            n_samples: request.config.n_samples,
            min_p_ignored: request.config.min_p > 0.0 && !self.backend.honors_min_p(),
            timestamp: chrono::Utc::now().to_rfc3339(),
        };
        if let Ok(line) = serde_json::to_string(&row) {
            let mut file = log.lock().unwrap();
            let _ = writeln!(file, "{line}");
        }
    }

    /// Where min_p is requested but the backend ignores it, the run manifest
    /// should record this; exposed for manifest construction.
    pub fn min_p_ignored(&self, config: &GenerationConfig) -> bool {
        config.min_p > 0.0 && !self.backend.honors_min_p()
    }

    /// Returns exactly `n_samples` completion texts. A fully cache-warm
    /// request never reaches the backend.
    pub fn generate(&self, request: &ChatRequest) -> Result<Vec<String>> {
        request.config.validate()?;
        let n = request.config.n_samples;
        let keys: Vec<String> = (0..n).map(|i| request.cache_key(i)).collect();
        let cached: Vec<Option<String>> = keys.iter().map(|k| self.cache_read(k)).collect();
        if cached.iter().all(Option::is_some) {
            self.audit(request, true, 0);
            return Ok(cached.into_iter().map(Option::unwrap).collect());
        }

        let (texts, attempts) = self.call_with_retry(request)?;
        if texts.len() != n as usize {
            return Err(Error::Protocol(format!(
                "backend {} returned {} texts for n_samples={n}",
                self.backend.name(),
                texts.len()
            )));
        }
        for (key, text) in keys.iter().zip(texts.iter()) {
            self.cache_write(key, text)?;
        }
        self.audit(request, false, attempts);
        Ok(texts)
    }

    fn call_with_retry(&self, request: &ChatRequest) -> Result<(Vec<String>, u32)> {
        let mut backoff = self.retry.initial_backoff_ms as f64;
        let mut last_err = String::new();
        for attempt in 1..=self.retry.max_attempts {
            self.gate.acquire();
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            let result = self.backend.generate(request);
            self.gate.release();
            match result {
                Ok(texts) => return Ok((texts, attempt)),
                Err(Error::Protocol(m)) => return Err(Error::Protocol(m)),
                Err(e) => last_err = e.to_string(),
            }
            if attempt < self.retry.max_attempts && backoff >= 1.0 {
                std::thread::sleep(std::time::Duration::from_millis(backoff as u64));
                backoff *= self.retry.backoff_multiplier;
            }
        }
        Err(Error::Backend { attempts: self.retry.max_attempts, message: last_err })
    }
}

/// OpenAI-style chat-completions backend. Endpoint and credential come from
/// the environment: `STORYDISTILL_BACKEND_URL`, `STORYDISTILL_BACKEND_KEY`,
/// and `STORYDISTILL_BACKEND_MODEL`.
pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    model: String,
    client: reqwest::blocking::Client,
    honors_min_p: bool,
}

impl HttpBackend {
    pub const URL_VAR: &'static str = "STORYDISTILL_BACKEND_URL";
    pub const KEY_VAR: &'static str = "STORYDISTILL_BACKEND_KEY";
    pub const MODEL_VAR: &'static str = "STORYDISTILL_BACKEND_MODEL";

    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(Self::URL_VAR)
            .map_err(|_| Error::Config(format!("{} not set", Self::URL_VAR)))?;
        let model = std::env::var(Self::MODEL_VAR)
            .map_err(|_| Error::Config(format!("{} not set", Self::MODEL_VAR)))?;
        let api_key = std::env::var(Self::KEY_VAR).ok();
        Ok(Self {
            endpoint,
            api_key,
            model,
            client: reqwest::blocking::Client::new(),
            honors_min_p: true,
        })
    }

    pub fn with_min_p_support(mut self, honors: bool) -> Self {
        self.honors_min_p = honors;
        self
    }
}

impl TextBackend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn honors_min_p(&self) -> bool {
        self.honors_min_p
    }

    fn generate(&self, request: &ChatRequest) -> Result<Vec<String>> {
        let messages: Vec<serde_json::Value> = request
            .messages
            .iter()
            .map(|m| {
                serde_json::json!({
                    "role": match m.role {
                        Role::System => "system",
                        Role::User => "user",
                        Role::Assistant => "assistant",
                    },
                    "content": m.text,
                })
            })
            .collect();
        let mut body = serde_json::json!({
            "model": self.model,
            "messages": messages,
            "temperature": request.config.temperature,
            "top_p": request.config.top_p,
            "max_tokens": request.config.max_new_tokens,
            "n": request.config.n_samples,
        });
        if self.honors_min_p && request.config.min_p > 0.0 {
            body["min_p"] = serde_json::json!(request.config.min_p);
        }
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let response = req
            .send()
            .map_err(|e| Error::Backend { attempts: 1, message: e.to_string() })?;
        let status = response.status();
        if !status.is_success() {
            return Err(Error::Backend {
                attempts: 1,
                message: format!("http status {status}"),
            });
        }
        let payload: serde_json::Value = response
            .json()
            .map_err(|e| Error::Protocol(format!("response is not JSON: {e}")))?;
        let choices = payload
            .get("choices")
            .and_then(|c| c.as_array())
            .ok_or_else(|| Error::Protocol("payload has no choices array".into()))?;
        let mut texts = Vec::with_capacity(choices.len());
        for choice in choices {
            let text = choice
                .pointer("/message/content")
                .and_then(|t| t.as_str())
                .ok_or_else(|| Error::Protocol("choice has no message.content".into()))?;
            texts.push(text.to_string());
        }
        Ok(texts)
    }
}

/// Scripted backends for tests, examples, and deterministic pipeline runs.
pub mod testing {
    use super::*;
    use std::sync::atomic::AtomicBool;

    /// Deterministic backend driven by a closure over the request.
    pub struct ScriptedText {
        name: String,
        respond: Box<dyn Fn(&ChatRequest) -> Result<String> + Send + Sync>,
    }

    impl ScriptedText {
        pub fn new(
            name: impl Into<String>,
            respond: impl Fn(&ChatRequest) -> Result<String> + Send + Sync + 'static,
        ) -> Self {
            Self { name: name.into(), respond: Box::new(respond) }
        }

        /// Always answers with the same text.
        pub fn fixed(text: impl Into<String>) -> Self {
            let text = text.into();
            Self::new("scripted-fixed", move |_| Ok(text.clone()))
        }

        /// Always fails with a transport-style error.
        pub fn failing() -> Self {
            Self::new("scripted-failing", |_| {
                Err(Error::Backend { attempts: 1, message: "scripted transport failure".into() })
            })
        }
    }

    impl TextBackend for ScriptedText {
        fn name(&self) -> &str {
            &self.name
        }
        fn generate(&self, request: &ChatRequest) -> Result<Vec<String>> {
            let text = (self.respond)(request)?;
            Ok(vec![text; request.config.n_samples as usize])
        }
    }

    /// Fails the first `failures` calls, then succeeds; exercises retry.
    pub struct FlakyText {
        remaining_failures: Mutex<u32>,
        text: String,
        pub saw_success: AtomicBool,
    }

    impl FlakyText {
        pub fn new(failures: u32, text: impl Into<String>) -> Self {
            Self {
                remaining_failures: Mutex::new(failures),
                text: text.into(),
                saw_success: AtomicBool::new(false),
            }
        }
    }

    impl TextBackend for FlakyText {
        fn name(&self) -> &str {
            "scripted-flaky"
        }
        fn generate(&self, request: &ChatRequest) -> Result<Vec<String>> {
            let mut remaining = self.remaining_failures.lock().unwrap();
            if *remaining > 0 {
                *remaining -= 1;
                return Err(Error::Backend { attempts: 1, message: "flaky failure".into() });
            }
            self.saw_success.store(true, Ordering::SeqCst);
            Ok(vec![self.text.clone(); request.config.n_samples as usize])
        }
    }
}
