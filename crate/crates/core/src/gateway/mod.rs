//! OpenAI-compatible chat completion gateway.
//!
//! A [`Gateway`] wraps a [`ChatBackend`] (HTTP or scripted mock) with retry
//! and backoff, an in-flight bound, and an optional content-addressed
//! response cache with single-flight semantics per cache key.

mod cache;
mod http;
pub mod mock;

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{CacheKey, ResponseCache};
pub use http::{OpenAiBackend, API_KEY_ENV};
pub use mock::{MockBackend, MockRequest};

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 16384;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("API error {status}: {body}")]
    Api { status: u16, body: String },
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("cache error: {0}")]
    Cache(String),
    #[error("malformed completion response: {0}")]
    MalformedResponse(String),
    #[error("invalid chat parameters: {0}")]
    InvalidParams(String),
}

impl GatewayError {
    /// Transport failures, timeouts, 5xx and 429 are retried; other API
    /// errors surface immediately.
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Transport(_) | GatewayError::Timeout(_) => true,
            GatewayError::Api { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatParams {
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Upper bound the endpoint accepts; larger requests are clamped with a warning.
    pub output_token_limit: Option<u32>,
    pub endpoint: String,
    pub timeout: Duration,
    pub max_retries: u32,
    /// First backoff delay; doubles on every retry.
    pub retry_base_delay: Duration,
}

impl ChatParams {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            temperature: 0.0,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            output_token_limit: None,
            endpoint: "http://localhost:8000/v1".into(),
            timeout: Duration::from_secs(600),
            max_retries: 3,
            retry_base_delay: Duration::from_millis(500),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::InvalidParams(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidParams("max_output_tokens must be > 0".into()));
        }
        if self.model.trim().is_empty() {
            return Err(GatewayError::InvalidParams("model name is empty".into()));
        }
        Ok(())
    }

    /// `max_output_tokens` after applying the endpoint limit.
    pub fn effective_max_tokens(&self) -> u32 {
        match self.output_token_limit {
            Some(limit) if limit < self.max_output_tokens => {
                log::warn!(
                    "clamping max_output_tokens {} to endpoint limit {} for model {}",
                    self.max_output_tokens,
                    limit,
                    self.model
                );
                limit
            }
            _ => self.max_output_tokens,
        }
    }

    pub fn request(&self, messages: &[ChatMessage]) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages: messages.to_vec(),
            temperature: self.temperature,
            max_tokens: self.effective_max_tokens(),
        }
    }
}

/// Request body of `POST {endpoint}/chat/completions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

/// Side-channel context for a request. Not sent upstream and not part of the
/// cache key; mock backends use it to look up scripted responses.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RequestMeta {
    pub sentence_id: Option<String>,
}

impl RequestMeta {
    pub fn for_sentence(id: impl Into<String>) -> Self {
        Self {
            sentence_id: Some(id.into()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub text: String,
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: Option<Usage>,
    pub latency: Duration,
    /// Upstream attempts made; 0 for a cache hit.
    pub attempts: u32,
    pub cached: bool,
}

pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &ChatRequest, timeout: Duration, meta: &RequestMeta) -> Result<BackendReply, GatewayError>;
}

struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.freed.wait(permits).unwrap();
        }
        *permits -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    cache: Option<ResponseCache>,
    inflight: Semaphore,
    key_locks: Mutex<HashMap<CacheKey, Arc<Mutex<()>>>>,
    upstream_calls: AtomicUsize,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, max_inflight: usize) -> Self {
        Self {
            backend,
            cache: None,
            inflight: Semaphore::new(max_inflight),
            key_locks: Mutex::new(HashMap::new()),
            upstream_calls: AtomicUsize::new(0),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Requests that actually reached the backend, retries included.
    pub fn upstream_calls(&self) -> usize {
        self.upstream_calls.load(Ordering::SeqCst)
    }

    /// Uncached completion with retry and exponential backoff.
    pub fn complete(
        &self,
        messages: &[ChatMessage],
        params: &ChatParams,
        meta: &RequestMeta,
    ) -> Result<Completion, GatewayError> {
        params.validate()?;
        self.send_with_retry(&params.request(messages), params, meta)
    }

    fn send_with_retry(
        &self,
        request: &ChatRequest,
        params: &ChatParams,
        meta: &RequestMeta,
    ) -> Result<Completion, GatewayError> {
        let started = Instant::now();
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            let result = {
                let _permit = self.inflight.acquire();
                self.upstream_calls.fetch_add(1, Ordering::SeqCst);
                self.backend.send(request, params.timeout, meta)
            };
            match result {
                Ok(reply) => {
                    return Ok(Completion {
                        text: reply.text,
                        usage: reply.usage,
                        latency: started.elapsed(),
                        attempts,
                        cached: false,
                    })
                }
                Err(err) if err.is_retryable() && attempts <= params.max_retries => {
                    let delay = params.retry_base_delay.saturating_mul(1 << (attempts - 1).min(16));
                    log::warn!(
                        "{} attempt {attempts} failed ({err}); retrying in {delay:?}",
                        params.model
                    );
                    std::thread::sleep(delay);
                }
                Err(err) => return Err(err),
            }
        }
    }

    /// Completion served from the cache when possible. Concurrent callers with
    /// the same key wait for a single upstream request.
    pub fn cached_complete(
        &self,
        messages: &[ChatMessage],
        params: &ChatParams,
        meta: &RequestMeta,
    ) -> Result<Completion, GatewayError> {
        params.validate()?;
        let Some(cache) = &self.cache else {
            return self.complete(messages, params, meta);
        };
        let request = params.request(messages);
        let key = CacheKey::for_request(&request);

        let lock = {
            let mut locks = self.key_locks.lock().unwrap();
            locks.entry(key.clone()).or_default().clone()
        };
        let _guard = lock.lock().unwrap();

        match cache.get(&key, &request) {
            Ok(Some(hit)) => {
                return Ok(Completion {
                    text: hit.text,
                    usage: hit.usage,
                    latency: Duration::ZERO,
                    attempts: 0,
                    cached: true,
                })
            }
            Ok(None) => {}
            Err(err) => log::warn!("{err}; falling back to the endpoint"),
        }

        let completion = self.send_with_retry(&request, params, meta)?;
        if let Err(err) = cache.put(&key, &request, &completion.text, completion.usage) {
            log::warn!("could not store response in cache: {err}");
        }
        Ok(completion)
    }
}
