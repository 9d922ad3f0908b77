//! Clients for the external model services (chat VLM/LLM, detectors,
//! aesthetic scorer) with retries, per-backend concurrency limits and a
//! response cache, plus a deterministic mock server for offline runs.

pub mod mock;
mod retry;
mod wire;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::datamodel::{canonical_json, Digest128};

pub use retry::{backoff_ceiling, backoff_delay};
pub use wire::{
    decode_image_field, detect_request_body, scorer_request_body, ChatRequest, ChatResponse, Message, Part,
    RawDetection, Role, TokenAlternative,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Chat,
    Detector,
    Scorer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    #[serde(default)]
    pub id: String,
    pub kind: BackendKind,
    pub endpoint: String,
    #[serde(default)]
    pub model_name: String,
    #[serde(default = "defaults::timeout")]
    pub timeout: f64,
    #[serde(default = "defaults::max_retries")]
    pub max_retries: u32,
    #[serde(default = "defaults::backoff_base")]
    pub backoff_base: f64,
    #[serde(default = "defaults::max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bearer_token: Option<String>,
}

mod defaults {
    pub fn timeout() -> f64 {
        120.0
    }
    pub fn max_retries() -> u32 {
        3
    }
    pub fn backoff_base() -> f64 {
        0.5
    }
    pub fn max_in_flight() -> usize {
        8
    }
}

impl BackendSpec {
    pub fn new(id: impl Into<String>, kind: BackendKind, endpoint: impl Into<String>) -> Self {
        BackendSpec {
            id: id.into(),
            kind,
            endpoint: endpoint.into(),
            model_name: String::new(),
            timeout: defaults::timeout(),
            max_retries: defaults::max_retries(),
            backoff_base: defaults::backoff_base(),
            max_in_flight: defaults::max_in_flight(),
            bearer_token: None,
        }
    }

    pub fn check(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("backend id is empty".into());
        }
        if self.timeout.is_nan() || self.timeout <= 0.0 {
            return Err(format!("backend {}: timeout must be > 0", self.id));
        }
        if self.max_in_flight == 0 {
            return Err(format!("backend {}: max_in_flight must be >= 1", self.id));
        }
        if self.backoff_base < 0.0 {
            return Err(format!("backend {}: backoff_base must be >= 0", self.id));
        }
        Ok(())
    }

    /// Name of the environment variable overriding this backend's endpoint.
    pub fn env_override_key(id: &str) -> String {
        let upper: String =
            id.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' }).collect();
        format!("ROVI_BACKEND_{upper}_URL")
    }

    pub fn apply_env_override(&mut self) {
        if let Ok(url) = std::env::var(Self::env_override_key(&self.id)) {
            if !url.is_empty() {
                self.endpoint = url;
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("unknown backend {0:?}")]
    UnknownBackend(String),
    #[error("backend {backend}: expected a {expected:?} backend, configured as {actual:?}")]
    WrongKind { backend: String, expected: BackendKind, actual: BackendKind },
    #[error("backend {backend}: transport error: {message}")]
    Transport { backend: String, message: String },
    #[error("backend {backend}: HTTP {status}: {body}")]
    Status { backend: String, status: u16, body: String },
    #[error("backend {backend}: malformed response: {message}")]
    Malformed { backend: String, message: String },
    #[error("backend {backend}: protocol violation: {message}")]
    Protocol { backend: String, message: String },
    #[error("backend {backend}: gave up after {attempts} attempts: {cause}")]
    Exhausted {
        backend: String,
        attempts: u32,
        #[source]
        cause: Box<GatewayError>,
    },
}

impl GatewayError {
    fn retryable(&self) -> bool {
        match self {
            GatewayError::Transport { .. } | GatewayError::Malformed { .. } => true,
            // Client errors other than timeouts and throttling will not improve.
            GatewayError::Status { status, .. } => *status >= 500 || *status == 408 || *status == 429,
            _ => false,
        }
    }
}

#[derive(Debug, Default)]
struct Counters {
    calls: AtomicU64,
    retries: AtomicU64,
    cache_hits: AtomicU64,
    failures: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BackendMetrics {
    /// HTTP requests actually sent, retries included.
    pub calls: u64,
    pub retries: u64,
    pub cache_hits: u64,
    /// Logical requests that failed after exhausting retries.
    pub failures: u64,
}

struct Semaphore {
    available: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore { available: Mutex::new(n), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("semaphore poisoned");
        while *n == 0 {
            n = self.cv.wait(n).expect("semaphore poisoned");
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

struct Backend {
    spec: BackendSpec,
    agent: ureq::Agent,
    budget: Semaphore,
    counters: Counters,
}

/// Share-safe client for all configured backends.
pub struct Gateway {
    backends: BTreeMap<String, Backend>,
    memory_cache: Mutex<HashMap<(String, Digest128), Value>>,
    cache_dir: Option<PathBuf>,
}

impl Gateway {
    /// `cache_dir`, when given, persists successful responses keyed by
    /// backend id and request digest.
    pub fn new(specs: impl IntoIterator<Item = BackendSpec>, cache_dir: Option<PathBuf>) -> Result<Self, String> {
        let mut backends = BTreeMap::new();
        for spec in specs {
            spec.check()?;
            let agent: ureq::Agent = ureq::Agent::config_builder()
                .timeout_global(Some(Duration::from_secs_f64(spec.timeout)))
                .http_status_as_error(false)
                .build()
                .into();
            let budget = Semaphore::new(spec.max_in_flight);
            let id = spec.id.clone();
            if backends.insert(id.clone(), Backend { spec, agent, budget, counters: Counters::default() }).is_some() {
                return Err(format!("duplicate backend id {id:?}"));
            }
        }
        Ok(Gateway { backends, memory_cache: Mutex::new(HashMap::new()), cache_dir })
    }

    pub fn spec(&self, backend: &str) -> Option<&BackendSpec> {
        self.backends.get(backend).map(|b| &b.spec)
    }

    pub fn metrics(&self, backend: &str) -> BackendMetrics {
        self.backends
            .get(backend)
            .map(|b| BackendMetrics {
                calls: b.counters.calls.load(Ordering::Relaxed),
                retries: b.counters.retries.load(Ordering::Relaxed),
                cache_hits: b.counters.cache_hits.load(Ordering::Relaxed),
                failures: b.counters.failures.load(Ordering::Relaxed),
            })
            .unwrap_or_default()
    }

    fn backend(&self, id: &str, kind: BackendKind) -> Result<&Backend, GatewayError> {
        let b = self.backends.get(id).ok_or_else(|| GatewayError::UnknownBackend(id.to_string()))?;
        if b.spec.kind != kind {
            return Err(GatewayError::WrongKind { backend: id.to_string(), expected: kind, actual: b.spec.kind });
        }
        Ok(b)
    }

    pub fn chat_complete(&self, backend: &str, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let b = self.backend(backend, BackendKind::Chat)?;
        let mut req = req.clone();
        if req.model.is_empty() {
            req.model = b.spec.model_name.clone();
        }
        let body = req.to_wire();
        let value = self.call(b, &body)?;
        let resp = ChatResponse::from_wire(&value)
            .map_err(|message| GatewayError::Malformed { backend: backend.to_string(), message })?;
        if req.logprobs && req.top_logprobs.is_some() && resp.alternatives.is_none() {
            return Err(GatewayError::Protocol {
                backend: backend.to_string(),
                message: "token alternatives requested but absent".into(),
            });
        }
        Ok(resp)
    }

    /// Sends one detection request. Every returned category must be one of
    /// `categories` and every score must lie in `[0,1]`.
    pub fn detect_request(
        &self,
        backend: &str,
        image: &[u8],
        categories: &[String],
        threshold: f64,
    ) -> Result<Vec<RawDetection>, GatewayError> {
        let b = self.backend(backend, BackendKind::Detector)?;
        let body = detect_request_body(image, categories, threshold);
        let value = self.call(b, &body)?;
        let malformed = |message: String| GatewayError::Malformed { backend: backend.to_string(), message };
        let dets: Vec<RawDetection> = serde_json::from_value(
            value.get("detections").cloned().ok_or_else(|| malformed("missing detections".into()))?,
        )
        .map_err(|e| malformed(e.to_string()))?;
        for d in &dets {
            if !categories.contains(&d.category) {
                return Err(GatewayError::Protocol {
                    backend: backend.to_string(),
                    message: format!("category {:?} was not requested", d.category),
                });
            }
            if !(0.0..=1.0).contains(&d.score) {
                return Err(GatewayError::Protocol {
                    backend: backend.to_string(),
                    message: format!("score {} outside [0,1]", d.score),
                });
            }
        }
        Ok(dets)
    }

    pub fn score(&self, backend: &str, image: &[u8]) -> Result<f64, GatewayError> {
        let b = self.backend(backend, BackendKind::Scorer)?;
        let value = self.call(b, &scorer_request_body(image))?;
        value["score"].as_f64().filter(|s| s.is_finite()).ok_or_else(|| GatewayError::Malformed {
            backend: backend.to_string(),
            message: "missing numeric score".into(),
        })
    }

    fn cache_path(&self, backend: &str, digest: &Digest128) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|d| d.join(backend).join(format!("{digest}.json")))
    }

    fn cache_get(&self, backend: &str, digest: &Digest128) -> Option<Value> {
        let key = (backend.to_string(), *digest);
        if let Some(v) = self.memory_cache.lock().expect("cache poisoned").get(&key) {
            return Some(v.clone());
        }
        let path = self.cache_path(backend, digest)?;
        let text = std::fs::read_to_string(path).ok()?;
        let v: Value = serde_json::from_str(&text).ok()?;
        self.memory_cache.lock().expect("cache poisoned").insert(key, v.clone());
        Some(v)
    }

    fn cache_put(&self, backend: &str, digest: &Digest128, value: &Value) {
        if let Some(path) = self.cache_path(backend, digest) {
            let write = || -> std::io::Result<()> {
                std::fs::create_dir_all(path.parent().expect("cache path has parent"))?;
                let tmp = path.with_extension(format!("tmp{}", std::process::id()));
                std::fs::write(&tmp, canonical_json(value))?;
                std::fs::rename(&tmp, &path)
            };
            if let Err(e) = write() {
                tracing::warn!(backend, error = %e, "could not persist response cache entry");
            }
        }
        self.memory_cache.lock().expect("cache poisoned").insert((backend.to_string(), *digest), value.clone());
    }

    fn call(&self, b: &Backend, body: &Value) -> Result<Value, GatewayError> {
        let digest = Digest128::of_value(body);
        if let Some(v) = self.cache_get(&b.spec.id, &digest) {
            b.counters.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(v);
        }
        let payload = canonical_json(body);
        let mut attempt = 0u32;
        loop {
            let result = {
                let _permit = b.budget.acquire();
                b.counters.calls.fetch_add(1, Ordering::Relaxed);
                post_json(b, &payload)
            };
            match result {
                Ok(v) => {
                    self.cache_put(&b.spec.id, &digest, &v);
                    return Ok(v);
                }
                Err(e) if e.retryable() && attempt < b.spec.max_retries => {
                    b.counters.retries.fetch_add(1, Ordering::Relaxed);
                    let delay = backoff_delay(b.spec.backoff_base, attempt, &mut rand::rng());
                    tracing::debug!(backend = %b.spec.id, attempt, ?delay, error = %e, "retrying");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => {
                    b.counters.failures.fetch_add(1, Ordering::Relaxed);
                    return Err(if e.retryable() {
                        GatewayError::Exhausted {
                            backend: b.spec.id.clone(),
                            attempts: attempt + 1,
                            cause: Box::new(e),
                        }
                    } else {
                        e
                    });
                }
            }
        }
    }
}

fn post_json(b: &Backend, payload: &str) -> Result<Value, GatewayError> {
    let url = &b.spec.endpoint;
    let backend = b.spec.id.clone();
    let mut request = b.agent.post(url).header("content-type", "application/json");
    if let Some(token) = &b.spec.bearer_token {
        request = request.header("authorization", &format!("Bearer {token}"));
    }
    let mut resp = request
        .send(payload)
        .map_err(|e| GatewayError::Transport { backend: backend.clone(), message: e.to_string() })?;
    let status = resp.status().as_u16();
    let text = resp
        .body_mut()
        .with_config()
        .limit(64 * 1024 * 1024)
        .read_to_string()
        .map_err(|e| GatewayError::Transport { backend: backend.clone(), message: e.to_string() })?;
    if !(200..300).contains(&status) {
        let body: String = text.chars().take(200).collect();
        return Err(GatewayError::Status { backend, status, body });
    }
    serde_json::from_str(&text).map_err(|e| GatewayError::Malformed { backend, message: e.to_string() })
}
