//! In-process chat-completions server for tests and offline runs.
//!
//! Each route tag is served under `/<tag>/v1/…` with its own
//! [`MockBehavior`], so one server can stand in for every endpoint of a run
//! (`base_url = http://<addr>/<tag>/v1`). Every request body is captured.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::{json, Value};
use tokio::task::JoinHandle;

use super::backend::{ChatRequest, ChatResponse, EmbeddingRequest, TransportError};
use super::mock::{hashed_bow, MockBehavior, MockStats, MOCK_EMBEDDING_DIM, MOCK_EMBEDDING_SEED};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapturedRequest {
    pub tag: String,
    pub path: String,
    pub body: Value,
}

#[derive(Debug, Clone, Default)]
struct Route {
    behavior: MockBehavior,
    delay: Duration,
    checkpoint_digest: Option<String>,
}

#[derive(Default)]
struct ServerState {
    routes: Mutex<HashMap<String, Route>>,
    captured: Mutex<Vec<CapturedRequest>>,
    stats: MockStats,
}

impl ServerState {
    fn route(&self, tag: &str) -> Option<Route> {
        self.routes.lock().expect("routes poisoned").get(tag).cloned()
    }

    fn capture(&self, tag: &str, path: &str, body: Value) {
        self.captured
            .lock()
            .expect("capture poisoned")
            .push(CapturedRequest {
                tag: tag.to_owned(),
                path: path.to_owned(),
                body,
            });
    }
}

pub struct MockServer {
    addr: SocketAddr,
    state: Arc<ServerState>,
    task: JoinHandle<()>,
}

impl MockServer {
    /// Binds an ephemeral localhost port and starts serving.
    pub async fn start() -> std::io::Result<Self> {
        let state = Arc::new(ServerState::default());
        let app = Router::new()
            .route("/{tag}/v1/chat/completions", post(chat))
            .route("/{tag}/v1/embeddings", post(embeddings))
            .route("/{tag}/v1/health", get(health))
            .with_state(state.clone());
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let task = tokio::spawn(async move {
            if let Err(e) = axum::serve(listener, app).await {
                tracing::error!(error = %e, "mock server stopped");
            }
        });
        Ok(Self { addr, state, task })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self, tag: &str) -> String {
        format!("http://{}/{tag}/v1", self.addr)
    }

    pub fn route(&self, tag: &str, behavior: MockBehavior) -> &Self {
        self.state
            .routes
            .lock()
            .expect("routes poisoned")
            .entry(tag.to_owned())
            .or_default()
            .behavior = behavior;
        self
    }

    pub fn set_delay(&self, tag: &str, delay: Duration) -> &Self {
        self.state
            .routes
            .lock()
            .expect("routes poisoned")
            .entry(tag.to_owned())
            .or_default()
            .delay = delay;
        self
    }

    /// Digest reported by `/<tag>/v1/health`.
    pub fn set_checkpoint_digest(&self, tag: &str, digest: impl Into<String>) -> &Self {
        self.state
            .routes
            .lock()
            .expect("routes poisoned")
            .entry(tag.to_owned())
            .or_default()
            .checkpoint_digest = Some(digest.into());
        self
    }

    pub fn captured(&self) -> Vec<CapturedRequest> {
        self.state.captured.lock().expect("capture poisoned").clone()
    }

    pub fn captured_for(&self, tag: &str) -> Vec<CapturedRequest> {
        self.captured().into_iter().filter(|c| c.tag == tag).collect()
    }

    pub fn clear_captured(&self) {
        self.state.captured.lock().expect("capture poisoned").clear();
    }

    pub fn requests(&self) -> usize {
        self.state.stats.requests()
    }

    pub fn peak_in_flight(&self) -> usize {
        self.state.stats.peak_in_flight()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

fn error_response(err: TransportError) -> Response {
    match err {
        TransportError::Status { status, body } => (
            StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            body,
        )
            .into_response(),
        // a body that is valid JSON but not a chat completion
        TransportError::Malformed(msg) => Json(json!({ "unexpected": msg })).into_response(),
        TransportError::Connect(msg) => (StatusCode::BAD_GATEWAY, msg).into_response(),
    }
}

async fn chat(
    State(state): State<Arc<ServerState>>,
    Path(tag): Path<String>,
    Json(body): Json<Value>,
) -> Response {
    let _in_flight = state.stats.enter();
    state.capture(&tag, "chat/completions", body.clone());
    let Some(route) = state.route(&tag) else {
        return (StatusCode::NOT_FOUND, format!("no route {tag}")).into_response();
    };
    let request: ChatRequest = match serde_json::from_value(body) {
        Ok(r) => r,
        Err(e) => return (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
    };
    if !route.delay.is_zero() {
        tokio::time::sleep(route.delay).await;
    }
    match route.behavior.respond(&request) {
        Ok(text) => Json(ChatResponse::single(text)).into_response(),
        Err(e) => error_response(e),
    }
}

async fn embeddings(
    State(state): State<Arc<ServerState>>,
    Path(tag): Path<String>,
    Json(body): Json<Value>,
) -> Response {
    let _in_flight = state.stats.enter();
    state.capture(&tag, "embeddings", body.clone());
    let request: EmbeddingRequest = match serde_json::from_value(body) {
        Ok(r) => r,
        Err(e) => return (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
    };
    let data: Vec<Value> = request
        .input
        .iter()
        .enumerate()
        .map(|(index, text)| {
            json!({
                "object": "embedding",
                "index": index,
                "embedding": hashed_bow(text, MOCK_EMBEDDING_DIM, MOCK_EMBEDDING_SEED),
            })
        })
        .collect();
    Json(json!({ "object": "list", "data": data, "model": request.model })).into_response()
}

async fn health(State(state): State<Arc<ServerState>>, Path(tag): Path<String>) -> Response {
    let digest = state.route(&tag).and_then(|r| r.checkpoint_digest);
    Json(json!({ "status": "ok", "checkpoint_digest": digest })).into_response()
}
