//! Transport backends and the chat-completions wire format.

use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{ChatMessage, EndpointSpec};
use crate::types::DecodingParams;

/// Request body for `POST <base_url>/chat/completions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(model: &str, messages: &[ChatMessage], decoding: &DecodingParams) -> Self {
        Self {
            model: model.to_owned(),
            messages: messages.to_vec(),
            temperature: decoding.temperature,
            top_p: decoding.top_p,
            max_tokens: decoding.max_tokens,
            seed: decoding.seed,
        }
    }

    pub fn last_user_content(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == super::ChatRole::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatResponse {
    #[serde(default)]
    pub id: Option<String>,
    pub choices: Vec<ChatChoice>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatChoice {
    #[serde(default)]
    pub index: usize,
    pub message: ChatMessage,
    #[serde(default)]
    pub finish_reason: Option<String>,
}

impl ChatResponse {
    pub fn single(content: String) -> Self {
        Self {
            id: None,
            choices: vec![ChatChoice {
                index: 0,
                message: ChatMessage::assistant(content),
                finish_reason: Some("stop".into()),
            }],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingRequest {
    pub model: String,
    pub input: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingResponse {
    pub data: Vec<EmbeddingDatum>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingDatum {
    #[serde(default)]
    pub index: usize,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Connect(_) => true,
            TransportError::Status { status, .. } => *status == 429 || *status >= 500,
            TransportError::Malformed(_) => false,
        }
    }
}

/// Something that can answer chat and embedding requests for an endpoint.
#[async_trait]
pub trait Backend: Send + Sync {
    async fn chat(&self, endpoint: &EndpointSpec, request: &ChatRequest)
        -> Result<String, TransportError>;

    async fn embed(
        &self,
        endpoint: &EndpointSpec,
        texts: &[String],
    ) -> Result<Vec<Vec<f64>>, TransportError>;

    /// Health document served next to the endpoint, if any.
    async fn health(&self, endpoint: &EndpointSpec) -> Result<Value, TransportError>;
}

/// Chat-completions-compatible HTTP transport.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: reqwest::Client,
}

impl HttpBackend {
    pub fn new(timeout: Duration) -> Self {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .expect("reqwest client builds with static settings");
        Self { client }
    }

    fn url(endpoint: &EndpointSpec, path: &str) -> String {
        format!("{}/{}", endpoint.base_url.trim_end_matches('/'), path)
    }

    fn authorize(endpoint: &EndpointSpec, req: reqwest::RequestBuilder) -> reqwest::RequestBuilder {
        match std::env::var(&endpoint.api_key_env) {
            Ok(key) if !endpoint.api_key_env.is_empty() && !key.is_empty() => req.bearer_auth(key),
            _ => req,
        }
    }

    async fn send(&self, req: reqwest::RequestBuilder) -> Result<Value, TransportError> {
        let resp = req
            .send()
            .await
            .map_err(|e| TransportError::Connect(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .await
            .map_err(|e| TransportError::Connect(e.to_string()))?;
        if !status.is_success() {
            return Err(TransportError::Status {
                status: status.as_u16(),
                body: text.chars().take(512).collect(),
            });
        }
        serde_json::from_str(&text).map_err(|e| TransportError::Malformed(e.to_string()))
    }
}

impl Default for HttpBackend {
    fn default() -> Self {
        Self::new(Duration::from_secs(120))
    }
}

/// Extracts `choices[0].message.content`.
pub fn parse_chat_response(body: Value) -> Result<String, TransportError> {
    let resp: ChatResponse =
        serde_json::from_value(body).map_err(|e| TransportError::Malformed(e.to_string()))?;
    resp.choices
        .into_iter()
        .next()
        .map(|c| c.message.content)
        .ok_or_else(|| TransportError::Malformed("no choices".into()))
}

/// Returns vectors ordered by `index`.
pub fn parse_embedding_response(body: Value) -> Result<Vec<Vec<f64>>, TransportError> {
    let mut resp: EmbeddingResponse =
        serde_json::from_value(body).map_err(|e| TransportError::Malformed(e.to_string()))?;
    resp.data.sort_by_key(|d| d.index);
    Ok(resp.data.into_iter().map(|d| d.embedding).collect())
}

#[async_trait]
impl Backend for HttpBackend {
    async fn chat(
        &self,
        endpoint: &EndpointSpec,
        request: &ChatRequest,
    ) -> Result<String, TransportError> {
        let req = self
            .client
            .post(Self::url(endpoint, "chat/completions"))
            .json(request);
        let body = self.send(Self::authorize(endpoint, req)).await?;
        parse_chat_response(body)
    }

    async fn embed(
        &self,
        endpoint: &EndpointSpec,
        texts: &[String],
    ) -> Result<Vec<Vec<f64>>, TransportError> {
        let payload = EmbeddingRequest {
            model: endpoint.model_name.clone(),
            input: texts.to_vec(),
        };
        let req = self
            .client
            .post(Self::url(endpoint, "embeddings"))
            .json(&payload);
        let body = self.send(Self::authorize(endpoint, req)).await?;
        parse_embedding_response(body)
    }

    async fn health(&self, endpoint: &EndpointSpec) -> Result<Value, TransportError> {
        let req = self.client.get(Self::url(endpoint, "health"));
        self.send(Self::authorize(endpoint, req)).await
    }
}
