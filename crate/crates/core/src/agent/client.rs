//! Model access: the chat endpoint client, a scripted stand-in, and the
//! cached, bounded-parallel batch driver.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::cache::ResponseCache;
use super::prompt::PromptBundle;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModelError {
    #[error("network error: {message}")]
    Network { message: String },
    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("unexpected response: {message}")]
    Protocol { message: String },
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<ModelError> },
}

impl ModelError {
    pub fn is_retryable(&self) -> bool {
        match self {
            ModelError::Network { .. } | ModelError::Timeout => true,
            ModelError::Http { status, .. } => *status == 429 || *status >= 500,
            ModelError::Protocol { .. } | ModelError::Exhausted { .. } => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    pub timeout_secs: u64,
    pub seed: Option<u64>,
    pub retries: u32,
    pub backoff_ms: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            endpoint: "http://127.0.0.1:11434".into(),
            model: "qwen3:4b-q4_K_M".into(),
            temperature: 0.0,
            max_tokens: None,
            timeout_secs: 120,
            seed: Some(0),
            retries: 3,
            backoff_ms: 500,
        }
    }
}

/// One generation call.
#[derive(Debug, Clone, Copy)]
pub struct GenerationRequest<'a> {
    pub instance_id: &'a str,
    pub prompt: &'a PromptBundle,
    /// Rule lines contained in the prompt, in order.
    pub rules: &'a [String],
}

pub trait Generator: Send + Sync {
    /// Tag identifying the model; part of the cache key.
    fn model_tag(&self) -> String;

    fn generate(&self, request: &GenerationRequest<'_>) -> std::result::Result<String, ModelError>;
}

/// Client for a local chat endpoint speaking the `/api/chat` protocol.
pub struct OllamaClient {
    config: ModelConfig,
    http: reqwest::blocking::Client,
}

impl OllamaClient {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.temperature < 0.0 {
            return Err(crate::error::Error::InvalidParameter("temperature must be >= 0".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ModelError::Network { message: e.to_string() })?;
        Ok(OllamaClient { config, http })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn attempt(&self, prompt: &PromptBundle) -> std::result::Result<String, ModelError> {
        let mut options = serde_json::json!({ "temperature": self.config.temperature });
        if let Some(seed) = self.config.seed {
            options["seed"] = seed.into();
        }
        if let Some(n) = self.config.max_tokens {
            options["num_predict"] = n.into();
        }
        let body = serde_json::json!({
            "model": self.config.model,
            "stream": false,
            "messages": [
                { "role": "system", "content": prompt.system_text },
                { "role": "user", "content": prompt.human_text },
            ],
            "options": options,
        });
        let url = format!("{}/api/chat", self.config.endpoint.trim_end_matches('/'));
        let resp = self.http.post(&url).json(&body).send().map_err(|e| {
            if e.is_timeout() {
                ModelError::Timeout
            } else {
                ModelError::Network { message: e.to_string() }
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                ModelError::Timeout
            } else {
                ModelError::Network { message: e.to_string() }
            }
        })?;
        if !status.is_success() {
            return Err(ModelError::Http {
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| ModelError::Protocol { message: e.to_string() })?;
        v.pointer("/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| ModelError::Protocol {
                message: "response has no message.content".into(),
            })
    }
}

impl Generator for OllamaClient {
    fn model_tag(&self) -> String {
        self.config.model.clone()
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> std::result::Result<String, ModelError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            let started = Instant::now();
            let result = self.attempt(request.prompt);
            let latency_ms = started.elapsed().as_millis() as u64;
            match result {
                Ok(text) => {
                    tracing::debug!(instance = request.instance_id, latency_ms, attempt, chars = text.len(), "model response");
                    return Ok(text);
                }
                Err(e) if e.is_retryable() && attempt <= self.config.retries => {
                    let wait = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                    tracing::warn!(instance = request.instance_id, latency_ms, attempt, error = %e, wait_ms = wait, "retrying model request");
                    std::thread::sleep(Duration::from_millis(wait));
                }
                Err(e) if e.is_retryable() => {
                    return Err(ModelError::Exhausted {
                        attempts: attempt,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Canned programs keyed by question id, with per-rule overrides. When several
/// rules in the prompt override the same question, the one latest in the
/// rule order wins.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedModel {
    #[serde(default = "scripted_tag")]
    pub tag: String,
    /// Program returned when neither the defaults nor an override match.
    #[serde(default = "fallback_program")]
    pub fallback: String,
    #[serde(default)]
    pub defaults: BTreeMap<String, String>,
    /// rule text → question id → program.
    #[serde(default)]
    pub overrides: BTreeMap<String, BTreeMap<String, String>>,
    /// Question ids whose requests fail with a network error.
    #[serde(default)]
    pub failing: Vec<String>,
}

fn scripted_tag() -> String {
    "scripted".into()
}

fn fallback_program() -> String {
    "def run(value_list):\n    return (0.0, '')\n".into()
}

impl ScriptedModel {
    pub fn new() -> Self {
        ScriptedModel {
            tag: scripted_tag(),
            fallback: fallback_program(),
            ..Default::default()
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| crate::error::Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn set_default(&mut self, qid: &str, program: &str) -> &mut Self {
        self.defaults.insert(qid.into(), program.into());
        self
    }

    pub fn set_override(&mut self, rule: &str, qid: &str, program: &str) -> &mut Self {
        self.overrides.entry(rule.into()).or_default().insert(qid.into(), program.into());
        self
    }

    pub fn program_for(&self, qid: &str, rules: &[String]) -> String {
        rules
            .iter()
            .rev()
            .find_map(|r| self.overrides.get(r).and_then(|m| m.get(qid)))
            .or_else(|| self.defaults.get(qid))
            .cloned()
            .unwrap_or_else(|| self.fallback.clone())
    }
}

impl Generator for ScriptedModel {
    fn model_tag(&self) -> String {
        self.tag.clone()
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> std::result::Result<String, ModelError> {
        if self.failing.iter().any(|q| q == request.instance_id) {
            return Err(ModelError::Network {
                message: "scripted failure".into(),
            });
        }
        let program = self.program_for(request.instance_id, request.rules);
        Ok(format!("```python\n{}\n```", program.trim_end()))
    }
}

/// A generator behind an optional cache, with bounded parallel batches.
#[derive(Clone)]
pub struct Agent {
    generator: Arc<dyn Generator>,
    cache: Option<Arc<ResponseCache>>,
    parallelism: usize,
    bypass_cache: bool,
}

impl Agent {
    pub fn new(generator: Arc<dyn Generator>) -> Self {
        Agent {
            generator,
            cache: None,
            parallelism: 4,
            bypass_cache: false,
        }
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_parallelism(mut self, n: usize) -> Self {
        self.parallelism = n.max(1);
        self
    }

    /// Ignore cached responses (fresh ones are still stored).
    pub fn bypass_cache(mut self, bypass: bool) -> Self {
        self.bypass_cache = bypass;
        self
    }

    pub fn model_tag(&self) -> String {
        self.generator.model_tag()
    }

    pub fn parallelism(&self) -> usize {
        self.parallelism
    }

    pub fn respond(&self, request: &GenerationRequest<'_>) -> std::result::Result<String, ModelError> {
        let tag = self.generator.model_tag();
        let key = ResponseCache::key(&tag, request.prompt, request.instance_id);
        if !self.bypass_cache {
            if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
                return Ok(hit);
            }
        }
        let text = self.generator.generate(request)?;
        if let Some(c) = &self.cache {
            c.put(&key, &text);
        }
        Ok(text)
    }

    /// Runs `f` over `items` with at most `parallelism` in flight; results keep input order.
    pub fn map_bounded<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
        let next = AtomicUsize::new(0);
        let workers = self.parallelism.min(items.len()).max(1);
        let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
        let results = std::sync::Mutex::new(&mut slots);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= items.len() {
                        break;
                    }
                    let r = f(&items[i]);
                    results.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(r);
                });
            }
        });
        slots.into_iter().map(|r| r.expect("every item processed")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle() -> PromptBundle {
        PromptBundle {
            system_text: "s".into(),
            human_text: "h".into(),
            think_suppressed: false,
        }
    }

    #[test]
    fn scripted_override_order() {
        let mut m = ScriptedModel::new();
        m.set_default("q1", "A").set_override("r1", "q1", "B").set_override("r2", "q1", "C");
        assert_eq!(m.program_for("q1", &[]), "A");
        assert_eq!(m.program_for("q1", &["r1".into()]), "B");
        assert_eq!(m.program_for("q1", &["r1".into(), "r2".into()]), "C");
        assert_eq!(m.program_for("q1", &["r2".into(), "r1".into()]), "B");
        assert_eq!(m.program_for("q9", &[]), fallback_program());
    }

    #[test]
    fn scripted_round_trips_through_json() {
        let mut m = ScriptedModel::new();
        m.set_default("q1", "def run(v): return (1.0, '')");
        let back: ScriptedModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        let minimal: ScriptedModel = serde_json::from_str("{}").unwrap();
        assert_eq!(minimal.tag, "scripted");
    }

    #[test]
    fn map_bounded_keeps_order() {
        let agent = Agent::new(Arc::new(ScriptedModel::new())).with_parallelism(3);
        let items: Vec<u32> = (0..50).collect();
        assert_eq!(agent.map_bounded(&items, |x| x * 2), (0..50).map(|x| x * 2).collect::<Vec<_>>());
        assert!(agent.map_bounded(&Vec::<u32>::new(), |x| *x).is_empty());
    }

    #[test]
    fn cache_serves_repeat_requests() {
        let mut m = ScriptedModel::new();
        m.failing.push("q2".into());
        let cache = Arc::new(ResponseCache::in_memory());
        let agent = Agent::new(Arc::new(m)).with_cache(cache.clone());
        let p = bundle();
        let req = GenerationRequest { instance_id: "q1", prompt: &p, rules: &[] };
        let first = agent.respond(&req).unwrap();
        assert_eq!(cache.len(), 1);
        assert_eq!(agent.respond(&req).unwrap(), first);
        let bad = GenerationRequest { instance_id: "q2", prompt: &p, rules: &[] };
        assert!(matches!(agent.respond(&bad), Err(ModelError::Network { .. })));
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn retryable_classification() {
        assert!(ModelError::Timeout.is_retryable());
        assert!(ModelError::Http { status: 503, body: String::new() }.is_retryable());
        assert!(!ModelError::Http { status: 404, body: String::new() }.is_retryable());
        assert!(!ModelError::Protocol { message: String::new() }.is_retryable());
    }
}
