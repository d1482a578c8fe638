//! Uniform access to chat and embedding endpoints.
//!
//! [`LlmClient`] owns one slot per registered endpoint (backend, concurrency
//! cap, rate limiter) plus an optional on-disk cache and the outbound guard.
//! Every payload bound for an endpoint tagged [`Trust::Untrusted`] is checked
//! by the guard before any byte leaves the process.

pub mod backend;
pub mod cache;
pub mod guard;
pub mod limiter;
pub mod mock;
pub mod mock_server;

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::Semaphore;

pub use backend::{Backend, ChatRequest, HttpBackend, TransportError};
pub use cache::ResponseCache;
pub use guard::{guard_outbound, normalize, OutboundGuard};
pub use limiter::RateLimiter;
pub use mock::{MockBackend, MockBehavior};

use crate::types::{DecodingParams, ExternalResponse, SubQueryGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointKind {
    Chat,
    Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trust {
    Trusted,
    Untrusted,
}

/// Pipeline roles an endpoint may serve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointRole {
    Generator,
    External,
    Integrator,
    Attacker,
    Embedding,
    Judge,
    QaGenerator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointSpec {
    pub id: String,
    pub base_url: String,
    pub kind: EndpointKind,
    pub trust: Trust,
    pub model_name: String,
    #[serde(default)]
    pub api_key_env: String,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_rps")]
    pub requests_per_second: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub roles: Vec<EndpointRole>,
}

fn default_concurrency() -> usize {
    4
}

fn default_rps() -> f64 {
    50.0
}

impl EndpointSpec {
    pub fn new(id: &str, kind: EndpointKind, trust: Trust, model_name: &str) -> Self {
        Self {
            id: id.to_owned(),
            base_url: format!("mock://{id}"),
            kind,
            trust,
            model_name: model_name.to_owned(),
            api_key_env: String::new(),
            max_concurrency: default_concurrency(),
            requests_per_second: 1_000.0,
            roles: Vec::new(),
        }
    }

    pub fn chat(id: &str, trust: Trust, model_name: &str) -> Self {
        Self::new(id, EndpointKind::Chat, trust, model_name)
    }

    pub fn embedding(id: &str, trust: Trust, model_name: &str) -> Self {
        Self::new(id, EndpointKind::Embedding, trust, model_name)
    }

    pub fn with_base_url(mut self, url: impl Into<String>) -> Self {
        self.base_url = url.into();
        self
    }

    pub fn with_concurrency(mut self, n: usize) -> Self {
        self.max_concurrency = n;
        self
    }

    pub fn with_rate(mut self, rps: f64) -> Self {
        self.requests_per_second = rps;
        self
    }

    pub fn with_roles(mut self, roles: &[EndpointRole]) -> Self {
        self.roles = roles.to_vec();
        self
    }

    pub fn is_trusted(&self) -> bool {
        self.trust == Trust::Trusted
    }

    pub fn has_role(&self, role: EndpointRole) -> bool {
        self.roles.contains(&role)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub cached: bool,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Error)]
pub enum ClientError {
    #[error("endpoint {endpoint} unreachable after {attempts} attempt(s): {message}")]
    Unreachable {
        endpoint: String,
        attempts: u32,
        message: String,
    },
    #[error("endpoint {endpoint} still rate limited after {attempts} attempt(s)")]
    RateLimited { endpoint: String, attempts: u32 },
    #[error("endpoint {endpoint} rejected the request with status {status}: {body}")]
    Rejected {
        endpoint: String,
        status: u16,
        body: String,
    },
    #[error("malformed response from {endpoint}: {message}")]
    MalformedResponse { endpoint: String, message: String },
    #[error("payload for untrusted endpoint {endpoint} contains protected text")]
    PrivacyViolation { endpoint: String },
    #[error("endpoint {endpoint} returned ragged embeddings")]
    DimensionMismatch { endpoint: String },
    #[error("sub-queries {indices:?} failed on {endpoint}")]
    PartialFailure {
        endpoint: String,
        indices: BTreeSet<usize>,
    },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("endpoint {0} is not registered with this client")]
    UnknownEndpoint(String),
    #[error("cache i/o: {0}")]
    Cache(String),
}

impl From<std::io::Error> for ClientError {
    fn from(e: std::io::Error) -> Self {
        ClientError::Cache(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts per request, including the first.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay_ms: 250,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    /// Delay before attempt `attempt + 1`, doubling from the base.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(20);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

/// One payload actually transmitted to an untrusted endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutboundRecord {
    pub endpoint_id: String,
    pub payload: String,
}

struct Slot {
    spec: EndpointSpec,
    backend: Arc<dyn Backend>,
    permits: Semaphore,
    limiter: RateLimiter,
}

struct Inner {
    slots: HashMap<String, Slot>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    secrets: Vec<String>,
    audit: Mutex<Vec<OutboundRecord>>,
}

/// Cheaply cloneable handle; clones share limiters, caps, cache and audit log.
#[derive(Clone)]
pub struct LlmClient {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("endpoints", &self.inner.slots.keys().collect::<Vec<_>>())
            .field("retry", &self.inner.retry)
            .finish()
    }
}

#[derive(Default)]
pub struct LlmClientBuilder {
    endpoints: Vec<(EndpointSpec, Arc<dyn Backend>)>,
    cache_dir: Option<PathBuf>,
    retry: RetryPolicy,
    secrets: Vec<String>,
}

impl LlmClientBuilder {
    pub fn endpoint(mut self, spec: EndpointSpec, backend: Arc<dyn Backend>) -> Self {
        self.endpoints.push((spec, backend));
        self
    }

    pub fn cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Extra strings that must never reach an untrusted endpoint.
    pub fn secret(mut self, secret: impl Into<String>) -> Self {
        self.secrets.push(secret.into());
        self
    }

    pub fn build(self) -> Result<LlmClient, ClientError> {
        let mut slots = HashMap::new();
        for (spec, backend) in self.endpoints {
            if spec.max_concurrency == 0 {
                return Err(ClientError::Precondition(format!(
                    "endpoint {} needs max_concurrency >= 1",
                    spec.id
                )));
            }
            if !(spec.requests_per_second > 0.0) {
                return Err(ClientError::Precondition(format!(
                    "endpoint {} needs requests_per_second > 0",
                    spec.id
                )));
            }
            let slot = Slot {
                permits: Semaphore::new(spec.max_concurrency),
                limiter: RateLimiter::new(spec.requests_per_second),
                spec: spec.clone(),
                backend,
            };
            if slots.insert(spec.id.clone(), slot).is_some() {
                return Err(ClientError::Precondition(format!(
                    "duplicate endpoint id {}",
                    spec.id
                )));
            }
        }
        if self.retry.max_attempts == 0 {
            return Err(ClientError::Precondition("retry budget must be >= 1".into()));
        }
        Ok(LlmClient {
            inner: Arc::new(Inner {
                slots,
                cache: self.cache_dir.map(ResponseCache::new),
                retry: self.retry,
                secrets: self.secrets,
                audit: Mutex::new(Vec::new()),
            }),
        })
    }
}

impl LlmClient {
    pub fn builder() -> LlmClientBuilder {
        LlmClientBuilder::default()
    }

    fn slot(&self, endpoint: &EndpointSpec) -> Result<&Slot, ClientError> {
        let slot = self
            .inner
            .slots
            .get(&endpoint.id)
            .ok_or_else(|| ClientError::UnknownEndpoint(endpoint.id.clone()))?;
        if slot.spec.trust != endpoint.trust {
            return Err(ClientError::Precondition(format!(
                "trust tag of endpoint {} differs from the registered one",
                endpoint.id
            )));
        }
        Ok(slot)
    }

    pub fn endpoint(&self, id: &str) -> Option<&EndpointSpec> {
        self.inner.slots.get(id).map(|s| &s.spec)
    }

    /// Payloads that were transmitted to untrusted endpoints so far.
    pub fn outbound_log(&self) -> Vec<OutboundRecord> {
        self.inner.audit.lock().expect("audit poisoned").clone()
    }

    fn guard_for(&self, call_guard: &OutboundGuard) -> OutboundGuard {
        call_guard.clone().extend(&self.inner.secrets)
    }

    fn check_outbound(
        &self,
        slot: &Slot,
        payload: &str,
        guard: &OutboundGuard,
    ) -> Result<(), ClientError> {
        if slot.spec.trust == Trust::Untrusted && !self.guard_for(guard).allows(payload) {
            tracing::warn!(endpoint = %slot.spec.id, "blocked outbound payload");
            return Err(ClientError::PrivacyViolation {
                endpoint: slot.spec.id.clone(),
            });
        }
        Ok(())
    }

    fn record_outbound(&self, slot: &Slot, payload: &str) {
        if slot.spec.trust == Trust::Untrusted {
            self.inner
                .audit
                .lock()
                .expect("audit poisoned")
                .push(OutboundRecord {
                    endpoint_id: slot.spec.id.clone(),
                    payload: payload.to_owned(),
                });
        }
    }

    async fn with_retry<T, F, Fut>(&self, slot: &Slot, mut call: F) -> Result<T, ClientError>
    where
        F: FnMut() -> Fut,
        Fut: std::future::Future<Output = Result<T, TransportError>>,
    {
        let retry = self.inner.retry;
        let mut attempt = 0;
        loop {
            attempt += 1;
            slot.limiter.acquire().await;
            let result = {
                let _permit = slot.permits.acquire().await.expect("semaphore never closed");
                call().await
            };
            let err = match result {
                Ok(v) => return Ok(v),
                Err(e) => e,
            };
            if !err.is_retryable() || attempt >= retry.max_attempts {
                let endpoint = slot.spec.id.clone();
                return Err(match err {
                    TransportError::Connect(message) => ClientError::Unreachable {
                        endpoint,
                        attempts: attempt,
                        message,
                    },
                    TransportError::Status { status: 429, .. } => ClientError::RateLimited {
                        endpoint,
                        attempts: attempt,
                    },
                    TransportError::Status { status, body } if status >= 500 => {
                        ClientError::Unreachable {
                            endpoint,
                            attempts: attempt,
                            message: format!("status {status}: {body}"),
                        }
                    }
                    TransportError::Status { status, body } => ClientError::Rejected {
                        endpoint,
                        status,
                        body,
                    },
                    TransportError::Malformed(message) => {
                        ClientError::MalformedResponse { endpoint, message }
                    }
                });
            }
            tracing::debug!(endpoint = %slot.spec.id, attempt, error = %err, "retrying");
            tokio::time::sleep(retry.backoff(attempt)).await;
        }
    }

    /// First completion text for `messages`, with only the client-wide
    /// secrets guarding untrusted endpoints.
    pub async fn chat(
        &self,
        endpoint: &EndpointSpec,
        messages: &[ChatMessage],
        decoding: &DecodingParams,
    ) -> Result<Completion, ClientError> {
        self.chat_guarded(endpoint, messages, decoding, &OutboundGuard::empty())
            .await
    }

    pub async fn chat_guarded(
        &self,
        endpoint: &EndpointSpec,
        messages: &[ChatMessage],
        decoding: &DecodingParams,
        guard: &OutboundGuard,
    ) -> Result<Completion, ClientError> {
        let slot = self.slot(endpoint)?;
        if slot.spec.kind != EndpointKind::Chat {
            return Err(ClientError::Precondition(format!(
                "endpoint {} is not a chat endpoint",
                slot.spec.id
            )));
        }
        if messages.is_empty() {
            return Err(ClientError::Precondition("no messages".into()));
        }
        if messages
            .iter()
            .any(|m| m.role != ChatRole::Assistant && m.content.trim().is_empty())
        {
            return Err(ClientError::Precondition(
                "user and system messages must be nonempty".into(),
            ));
        }
        if !decoding.is_valid() {
            return Err(ClientError::Precondition(format!(
                "invalid decoding parameters {decoding:?}"
            )));
        }
        let payload = messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        self.check_outbound(slot, &payload, guard)?;

        let request = ChatRequest::new(&slot.spec.model_name, messages, decoding);
        let started = Instant::now();
        let fetch = || async {
            self.record_outbound(slot, &payload);
            let text = self
                .with_retry(slot, || slot.backend.chat(&slot.spec, &request))
                .await?;
            Ok::<_, ClientError>(Value::String(text))
        };
        let (value, cached) = match &self.inner.cache {
            Some(cache) => {
                let key = json!({
                    "endpoint_id": slot.spec.id,
                    "model_name": slot.spec.model_name,
                    "messages": messages,
                    "decoding": decoding,
                });
                cache.get_or_fetch(&slot.spec.id, &key, fetch).await?
            }
            None => (fetch().await?, false),
        };
        let text = match value {
            Value::String(s) => s,
            other => {
                return Err(ClientError::MalformedResponse {
                    endpoint: slot.spec.id.clone(),
                    message: format!("cached entry is not text: {other}"),
                })
            }
        };
        Ok(Completion {
            text,
            cached,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }

    /// One vector per text, all of equal dimension.
    pub async fn embed(
        &self,
        endpoint: &EndpointSpec,
        texts: &[String],
    ) -> Result<Vec<Vec<f64>>, ClientError> {
        let slot = self.slot(endpoint)?;
        if slot.spec.kind != EndpointKind::Embedding {
            return Err(ClientError::Precondition(format!(
                "endpoint {} is not an embedding endpoint",
                slot.spec.id
            )));
        }
        if texts.is_empty() {
            return Err(ClientError::Precondition("no texts to embed".into()));
        }
        let payload = texts.join("\n");
        self.check_outbound(slot, &payload, &OutboundGuard::empty())?;
        let fetch = || async {
            self.record_outbound(slot, &payload);
            let vectors = self
                .with_retry(slot, || slot.backend.embed(&slot.spec, texts))
                .await?;
            Ok::<_, ClientError>(json!(vectors))
        };
        let value = match &self.inner.cache {
            Some(cache) => {
                let key = json!({
                    "endpoint_id": slot.spec.id,
                    "model_name": slot.spec.model_name,
                    "input": texts,
                });
                cache.get_or_fetch(&slot.spec.id, &key, fetch).await?.0
            }
            None => fetch().await?,
        };
        let vectors: Vec<Vec<f64>> =
            serde_json::from_value(value).map_err(|e| ClientError::MalformedResponse {
                endpoint: slot.spec.id.clone(),
                message: e.to_string(),
            })?;
        if vectors.len() != texts.len() {
            return Err(ClientError::MalformedResponse {
                endpoint: slot.spec.id.clone(),
                message: format!("expected {} vectors, got {}", texts.len(), vectors.len()),
            });
        }
        let dim = vectors[0].len();
        if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
            return Err(ClientError::DimensionMismatch {
                endpoint: slot.spec.id.clone(),
            });
        }
        Ok(vectors)
    }

    /// Health document of the endpoint (used for checkpoint handshakes).
    pub async fn health(&self, endpoint: &EndpointSpec) -> Result<Value, ClientError> {
        let slot = self.slot(endpoint)?;
        self.with_retry(slot, || slot.backend.health(&slot.spec)).await
    }

    /// Sends every sub-query of `group` as its own single-message request.
    ///
    /// All sub-queries are checked by the guard before the first request is
    /// issued. Responses come back ordered by sub-query index; in-flight
    /// requests never exceed the endpoint's `max_concurrency`.
    pub async fn dispatch_group(
        &self,
        endpoint: &EndpointSpec,
        group: &SubQueryGroup,
        decoding: &DecodingParams,
        guard: &OutboundGuard,
    ) -> Result<Vec<ExternalResponse>, ClientError> {
        let slot = self.slot(endpoint)?;
        let effective = self.guard_for(guard);
        for sq in &group.subqueries {
            self.check_outbound(slot, &sq.text, &effective)?;
        }
        let effective = &effective;
        let calls = group.subqueries.iter().map(|sq| async move {
            let messages = [ChatMessage::user(sq.text.clone())];
            (
                sq.index,
                self.chat_guarded(endpoint, &messages, decoding, effective)
                    .await,
            )
        });
        let mut responses = Vec::with_capacity(group.len());
        let mut failed = BTreeSet::new();
        for (index, result) in join_all(calls).await {
            match result {
                Ok(c) => responses.push(ExternalResponse {
                    subquery_index: index,
                    text: c.text,
                    endpoint_id: endpoint.id.clone(),
                    latency_ms: c.latency_ms,
                    cached: c.cached,
                }),
                Err(ClientError::PrivacyViolation { endpoint }) => {
                    return Err(ClientError::PrivacyViolation { endpoint })
                }
                Err(e) => {
                    tracing::warn!(index, error = %e, "sub-query failed");
                    failed.insert(index);
                }
            }
        }
        if !failed.is_empty() {
            return Err(ClientError::PartialFailure {
                endpoint: endpoint.id.clone(),
                indices: failed,
            });
        }
        responses.sort_by_key(|r| r.subquery_index);
        Ok(responses)
    }
}
