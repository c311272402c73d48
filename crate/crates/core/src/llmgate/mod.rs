//! Chat-completion gateway: prompt templates, request hashing, a response
//! cache, retries, rate limiting and the backends (OpenAI-compatible HTTP and
//! a deterministic mock).

pub mod cache;
pub mod clock;
pub mod mock;
pub mod openai;
pub mod template;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{CacheEntry, ResponseCache};
pub use clock::{Clock, RateLimiter, SystemClock, VirtualClock};
pub use mock::{MockBackend, MockRule};
pub use openai::OpenAiBackend;
pub use template::{render_prompt, vars, RenderedPrompt, Template, TEMPLATES};

pub const CAPTION_TEMPERATURE: f64 = 0.2;
pub const QUESTION_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template {template} has unbound placeholder {name:?}")]
    UnboundPlaceholder { template: String, name: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend unavailable after {attempts} attempt(s): {detail}")]
    BackendUnavailable { attempts: u32, detail: String },
    #[error("backend refused the request: {0}")]
    ContentRefusal(String),
    #[error("call budget of {cap} dispatches exhausted")]
    BudgetExceeded { cap: usize },
    #[error("backend config: {0}")]
    Config(String),
    #[error("cache {} line {line}: {detail}", path.display())]
    CacheCorrupt {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub role: Role,
    pub text: String,
    /// PNG-encoded attachments.
    pub images: Vec<Arc<[u8]>>,
}

impl Message {
    pub fn text(role: Role, text: impl Into<String>) -> Message {
        Message {
            role,
            text: text.into(),
            images: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub backend_id: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub template_id: String,
    pub template_hash: String,
    pub variables: BTreeMap<String, String>,
}

impl ChatRequest {
    /// Renders `template_id` and attaches `images` to the last user message.
    pub fn from_template(
        backend_id: &str,
        template_id: &str,
        variables: BTreeMap<String, String>,
        images: Vec<Arc<[u8]>>,
        temperature: f64,
        max_tokens: u32,
    ) -> Result<ChatRequest, LlmError> {
        let mut prompt = render_prompt(template_id, &variables)?;
        if let Some(user) = prompt.messages.iter_mut().rev().find(|m| m.role == Role::User) {
            user.images = images;
        }
        let req = ChatRequest {
            backend_id: backend_id.to_string(),
            messages: prompt.messages,
            temperature,
            max_tokens,
            template_id: prompt.template_id,
            template_hash: prompt.template_hash,
            variables,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(LlmError::InvalidRequest("no user message".into()));
        }
        if self
            .messages
            .iter()
            .any(|m| m.role != Role::User && !m.images.is_empty())
        {
            return Err(LlmError::InvalidRequest("images on a non-user message".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }

    /// JSON with sorted keys in which each image is replaced by the hex
    /// sha256 of its bytes.
    pub fn canonical_json(&self) -> String {
        let messages: Vec<_> = self
            .messages
            .iter()
            .map(|m| {
                json!({
                    "role": m.role.as_str(),
                    "text": m.text,
                    "images": m.images.iter().map(|b| hex::encode(Sha256::digest(b))).collect::<Vec<_>>(),
                })
            })
            .collect();
        let v = json!({
            "backend_id": self.backend_id,
            "messages": messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "template_id": self.template_id,
            "template_hash": self.template_hash,
            "variables": self.variables,
        });
        // serde_json's default map is a BTreeMap, so keys come out sorted.
        serde_json::to_string(&v).expect("request serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn user_text(&self) -> String {
        self.messages
            .iter()
            .filter(|m| m.role == Role::User)
            .map(|m| m.text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub request_hash: String,
    pub response_text: String,
    /// Dispatches it took to obtain the response; for a cache hit, the count
    /// recorded when the entry was stored.
    pub attempts: u32,
    pub backend_model: String,
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendFailure {
    Transient(String),
    Refusal(String),
    Fatal(String),
}

pub trait ChatBackend: Send + Sync {
    fn model(&self) -> &str;
    fn dispatch(&self, request: &ChatRequest) -> Result<String, BackendFailure>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `n + 1` after `n` failures (n ≥ 1).
    pub fn backoff(&self, failures: u32) -> Duration {
        let factor = 1u64 << failures.saturating_sub(1).min(20);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Openai,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub backend_id: String,
    #[serde(default)]
    pub base_url: String,
    #[serde(default)]
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub rate_limit_per_s: Option<f64>,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default)]
    pub mock_seed: u64,
    #[serde(default)]
    pub timeout_s: Option<u64>,
}

fn default_attempts() -> u32 {
    RetryPolicy::default().max_attempts
}

impl BackendConfig {
    pub fn mock(backend_id: &str, seed: u64) -> BackendConfig {
        BackendConfig {
            backend_id: backend_id.to_string(),
            base_url: String::new(),
            model: "mock".into(),
            api_key_env: None,
            rate_limit_per_s: None,
            max_attempts: default_attempts(),
            kind: BackendKind::Mock,
            mock_seed: seed,
            timeout_s: None,
        }
    }

    pub fn load(path: &Path) -> Result<BackendConfig, LlmError> {
        let text = std::fs::read_to_string(path).map_err(|source| LlmError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))
    }

    pub fn build_backend(&self) -> Result<Arc<dyn ChatBackend>, LlmError> {
        Ok(match self.kind {
            BackendKind::Mock => Arc::new(MockBackend::new(self.mock_seed)),
            BackendKind::Openai => Arc::new(OpenAiBackend::from_config(self)?),
        })
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.max_attempts,
            ..RetryPolicy::default()
        }
    }
}

/// Shared entry point for all chat calls. Safe to use from many threads.
pub struct Gateway {
    backend_id: String,
    backend: Arc<dyn ChatBackend>,
    cache: Option<ResponseCache>,
    limiter: Option<Mutex<RateLimiter>>,
    clock: Arc<dyn Clock>,
    budget: Option<usize>,
    dispatched: AtomicUsize,
}

impl Gateway {
    pub fn new(backend_id: &str, backend: Arc<dyn ChatBackend>) -> Gateway {
        Gateway {
            backend_id: backend_id.to_string(),
            backend,
            cache: None,
            limiter: None,
            clock: Arc::new(SystemClock::new()),
            budget: None,
            dispatched: AtomicUsize::new(0),
        }
    }

    pub fn from_config(config: &BackendConfig, cache_dir: Option<&Path>) -> Result<Gateway, LlmError> {
        let mut g = Gateway::new(&config.backend_id, config.build_backend()?);
        if let Some(r) = config.rate_limit_per_s {
            g = g.with_rate_limit(r);
        }
        if let Some(dir) = cache_dir {
            g = g.with_cache(ResponseCache::open(dir, &config.backend_id)?);
        }
        Ok(g)
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Gateway {
        self.cache = Some(cache);
        self
    }

    pub fn with_rate_limit(mut self, per_second: f64) -> Gateway {
        self.limiter = RateLimiter::per_second(per_second).map(Mutex::new);
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Gateway {
        self.clock = clock;
        self
    }

    pub fn with_budget(mut self, max_dispatches: usize) -> Gateway {
        self.budget = Some(max_dispatches);
        self
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    pub fn backend_model(&self) -> &str {
        self.backend.model()
    }

    /// Network dispatches issued so far, failed attempts included.
    pub fn dispatch_count(&self) -> usize {
        self.dispatched.load(Ordering::SeqCst)
    }

    pub fn complete(&self, request: &ChatRequest, policy: &RetryPolicy) -> Result<ChatExchange, LlmError> {
        request.validate()?;
        let request_hash = request.hash();
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&request_hash)) {
            return Ok(ChatExchange {
                request_hash,
                response_text: hit.response_text,
                attempts: hit.attempts,
                backend_model: hit.backend_model,
                cached: true,
            });
        }
        let max_attempts = policy.max_attempts.max(1);
        let mut attempts = 0u32;
        loop {
            self.reserve_dispatch()?;
            if let Some(lim) = &self.limiter {
                lim.lock().unwrap().acquire(self.clock.as_ref());
            }
            attempts += 1;
            match self.backend.dispatch(request) {
                Ok(text) => {
                    let exchange = ChatExchange {
                        request_hash,
                        response_text: text,
                        attempts,
                        backend_model: self.backend.model().to_string(),
                        cached: false,
                    };
                    if let Some(c) = &self.cache {
                        c.insert(CacheEntry {
                            request_hash: exchange.request_hash.clone(),
                            response_text: exchange.response_text.clone(),
                            backend_model: exchange.backend_model.clone(),
                            attempts,
                        })?;
                    }
                    return Ok(exchange);
                }
                Err(BackendFailure::Refusal(why)) => return Err(LlmError::ContentRefusal(why)),
                Err(BackendFailure::Fatal(detail)) => {
                    return Err(LlmError::BackendUnavailable { attempts, detail })
                }
                Err(BackendFailure::Transient(detail)) => {
                    if attempts >= max_attempts {
                        return Err(LlmError::BackendUnavailable { attempts, detail });
                    }
                    log::debug!("transient failure on attempt {attempts}: {detail}");
                    self.clock.sleep(policy.backoff(attempts));
                }
            }
        }
    }

    fn reserve_dispatch(&self) -> Result<(), LlmError> {
        let prev = self.dispatched.fetch_add(1, Ordering::SeqCst);
        if let Some(cap) = self.budget {
            if prev >= cap {
                self.dispatched.fetch_sub(1, Ordering::SeqCst);
                return Err(LlmError::BudgetExceeded { cap });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(text: &str) -> ChatRequest {
        ChatRequest::from_template(
            "mock",
            "identify_object",
            vars([("description", text), ("candidates", "chair")]),
            Vec::new(),
            0.2,
            64,
        )
        .unwrap()
    }

    #[test]
    fn hash_ignores_nothing_but_image_encoding() {
        let a = req("a red chair");
        assert_eq!(a.hash(), req("a red chair").hash());
        assert_ne!(a.hash(), req("a red  chair").hash());
        let mut b = a.clone();
        b.messages[1].images = vec![Arc::from(&b"png"[..])];
        let mut c = a.clone();
        c.messages[1].images = vec![Arc::from(b"png".to_vec().into_boxed_slice())];
        assert_ne!(a.hash(), b.hash());
        assert_eq!(b.hash(), c.hash());
        let mut d = a.clone();
        d.temperature = 0.7;
        assert_ne!(a.hash(), d.hash());
    }

    #[test]
    fn canonical_json_keys_sorted() {
        let j = req("x").canonical_json();
        let keys = ["backend_id", "max_tokens", "messages", "temperature", "template_hash", "template_id", "variables"];
        let pos: Vec<usize> = keys.iter().map(|k| j.find(&format!("\"{k}\"")).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{j}");
    }

    #[test]
    fn request_validation() {
        let mut r = req("x");
        r.temperature = 2.5;
        assert!(matches!(r.validate(), Err(LlmError::InvalidRequest(_))));
        let mut r = req("x");
        r.messages[0].images.push(Arc::from(&b"i"[..]));
        assert!(r.validate().is_err());
        let mut r = req("x");
        r.messages.retain(|m| m.role == Role::System);
        assert!(r.validate().is_err());
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_attempts: 10,
            base_delay_ms: 100,
            max_delay_ms: 1000,
        };
        let d: Vec<u64> = (1..=6).map(|n| p.backoff(n).as_millis() as u64).collect();
        assert_eq!(d, [100, 200, 400, 800, 1000, 1000]);
    }

    #[test]
    fn config_parses_with_defaults() {
        let c: BackendConfig = serde_json::from_str(
            r#"{"backend_id":"vlm","base_url":"http://h/v1","model":"m","api_key_env":"KEY","rate_limit_per_s":2}"#,
        )
        .unwrap();
        assert_eq!(c.kind, BackendKind::Openai);
        assert_eq!(c.max_attempts, 4);
        assert!(serde_json::from_str::<BackendConfig>(r#"{"backend_id":"x","api_key":"secret"}"#).is_err());
    }
}
