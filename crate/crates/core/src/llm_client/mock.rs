//! Offline backends with a fixed, bit-exact contract.
//!
//! * chat echo: `MOCK[<model_name>]:<last user message content>`
//! * embeddings: signed hashed bag-of-words over [`tokenize`], 64 dims
//!
//! A few synthetic roles (decomposer, judge, QA writer) let mock runs of
//! the full pipeline produce parseable completions.

use std::collections::HashSet;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use async_trait::async_trait;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::backend::{Backend, ChatRequest, TransportError};
use super::EndpointSpec;
use crate::textmetrics::tokenize;

pub const MOCK_EMBEDDING_DIM: usize = 64;
pub const MOCK_EMBEDDING_SEED: u64 = 0x5eed;

pub type ScriptFn = dyn Fn(&ChatRequest) -> Result<String, TransportError> + Send + Sync;

/// What a mock chat endpoint answers.
#[derive(Clone, Default)]
pub enum MockBehavior {
    /// `MOCK[model]:<last user content>`.
    #[default]
    Echo,
    /// Numbered list of generalized sub-queries built from the prompt's
    /// `QUESTION:` block, varied by the request seed.
    Decomposer,
    /// A deterministic score in `[3.5, 5.0]` derived from the prompt.
    Judge,
    /// `Q:`/`A:` blocks drawn from the prompt's `DOCUMENT:` block.
    QaWriter,
    Script(Arc<ScriptFn>),
}

impl fmt::Debug for MockBehavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MockBehavior::Echo => f.write_str("Echo"),
            MockBehavior::Decomposer => f.write_str("Decomposer"),
            MockBehavior::Judge => f.write_str("Judge"),
            MockBehavior::QaWriter => f.write_str("QaWriter"),
            MockBehavior::Script(_) => f.write_str("Script(..)"),
        }
    }
}

impl MockBehavior {
    pub fn script<F>(f: F) -> Self
    where
        F: Fn(&ChatRequest) -> Result<String, TransportError> + Send + Sync + 'static,
    {
        MockBehavior::Script(Arc::new(f))
    }

    /// Always answers with `text`.
    pub fn fixed(text: impl Into<String>) -> Self {
        let text = text.into();
        Self::script(move |_| Ok(text.clone()))
    }

    /// Answers with successive items of `replies`, repeating the last one.
    pub fn sequence<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let replies: Vec<String> = replies.into_iter().map(Into::into).collect();
        assert!(!replies.is_empty(), "sequence needs at least one reply");
        let next = AtomicUsize::new(0);
        Self::script(move |_| {
            let i = next.fetch_add(1, Ordering::SeqCst).min(replies.len() - 1);
            Ok(replies[i].clone())
        })
    }

    pub fn respond(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let content = request.last_user_content();
        match self {
            MockBehavior::Echo => Ok(echo(&request.model, content)),
            MockBehavior::Decomposer => Ok(decompose(content, request.seed.unwrap_or(0))),
            MockBehavior::Judge => Ok(judge(content)),
            MockBehavior::QaWriter => Ok(write_qa(content)),
            MockBehavior::Script(f) => f(request),
        }
    }
}

pub fn echo(model: &str, content: &str) -> String {
    format!("MOCK[{model}]:{content}")
}

fn seed_bytes(seed: u64, text: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(text.as_bytes());
    h.finalize().into()
}

/// Signed feature hashing of the token bag into `dim` buckets.
pub fn hashed_bow(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for token in tokenize(text) {
        let d = seed_bytes(seed, &token);
        let bucket = u64::from_le_bytes(d[..8].try_into().unwrap()) as usize % dim;
        let sign = if d[8] & 1 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    }
    v
}

fn regex(pattern: &'static str, slot: &'static OnceLock<Regex>) -> &'static Regex {
    slot.get_or_init(|| Regex::new(pattern).expect("static regex"))
}

fn block_after<'a>(content: &'a str, label: &str) -> Option<&'a str> {
    let start = content.find(label)? + label.len();
    let rest = &content[start..];
    Some(rest.split("\n\n").next().unwrap_or(rest).trim())
}

fn requested_count(content: &str) -> Option<usize> {
    static RE: OnceLock<Regex> = OnceLock::new();
    regex(r"(?i)exactly\s+(\d+)", &RE)
        .captures(content)
        .and_then(|c| c[1].parse().ok())
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "can", "could", "did", "do", "does", "for",
    "from", "has", "have", "how", "if", "in", "into", "is", "it", "its", "may", "might", "of",
    "on", "or", "should", "that", "the", "their", "there", "these", "this", "those", "to", "was",
    "were", "what", "when", "where", "which", "who", "whom", "why", "will", "with", "would",
];

const SUBQUERY_TEMPLATES: &[&str] = &[
    "What is the general role of {} in this field?",
    "Which criteria are commonly used to assess {}?",
    "What mechanisms are typically associated with {}?",
    "How is {} usually studied or measured?",
    "What are common misconceptions about {}?",
    "What background concepts help in understanding {}?",
    "Which factors are known to influence {}?",
    "What are typical limitations when reasoning about {}?",
];

/// Synthetic generator used by mock runs. Each line mentions at most one
/// content word of the question, so no line reproduces the question.
pub fn decompose(content: &str, seed: u64) -> String {
    let question = block_after(content, "QUESTION:").unwrap_or(content);
    let n = requested_count(content).unwrap_or(9).max(1);
    let stop: HashSet<&str> = STOPWORDS.iter().copied().collect();
    let mut words: Vec<String> = Vec::new();
    for t in tokenize(question) {
        if t.chars().count() > 2 && !stop.contains(t.as_str()) && !words.contains(&t) {
            words.push(t);
        }
    }
    if words.is_empty() {
        words.push("this topic".into());
    }
    let mut rng = ChaCha8Rng::from_seed(seed_bytes(seed, question));
    (1..=n)
        .map(|i| {
            let word = words.choose(&mut rng).expect("nonempty");
            let template = SUBQUERY_TEMPLATES[rng.gen_range(0..SUBQUERY_TEMPLATES.len())];
            format!("{i}. {}", template.replace("{}", word))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn judge(content: &str) -> String {
    let d = seed_bytes(0, content);
    let score = 3.5 + 0.5 * f64::from(d[0] % 4);
    format!("{score:.1}")
}

/// Synthetic QA writer: one pair per sentence of the `DOCUMENT:` block.
pub fn write_qa(content: &str) -> String {
    let doc = block_after(content, "DOCUMENT:").unwrap_or(content);
    let n = requested_count(content).unwrap_or(3).max(1);
    let sentences: Vec<&str> = doc
        .split_terminator(['.', '!', '?'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    sentences
        .iter()
        .take(n)
        .map(|s| {
            let head: Vec<String> = tokenize(s).into_iter().take(4).collect();
            format!(
                "Q: What does the source report about {}?\nA: {}.",
                head.join(" "),
                s
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Counters shared by a mock backend; peak concurrency is tracked across
/// all requests.
#[derive(Debug, Default)]
pub struct MockStats {
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
    requests: AtomicUsize,
    seen: Mutex<Vec<ChatRequest>>,
}

impl MockStats {
    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    pub fn seen(&self) -> Vec<ChatRequest> {
        self.seen.lock().expect("stats poisoned").clone()
    }

    pub(crate) fn enter(&self) -> InFlight<'_> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        InFlight(self)
    }
}

pub(crate) struct InFlight<'a>(&'a MockStats);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    behavior: MockBehavior,
    delay: Duration,
    embedding_dim: usize,
    embedding_seed: u64,
    health: Option<String>,
    stats: Arc<MockStats>,
}

impl MockBackend {
    pub fn new(behavior: MockBehavior) -> Self {
        Self {
            behavior,
            delay: Duration::ZERO,
            embedding_dim: MOCK_EMBEDDING_DIM,
            embedding_seed: MOCK_EMBEDDING_SEED,
            health: None,
            stats: Arc::default(),
        }
    }

    pub fn echo() -> Self {
        Self::new(MockBehavior::Echo)
    }

    /// Holds every request open for `delay` so concurrency becomes observable.
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn with_checkpoint_digest(mut self, digest: impl Into<String>) -> Self {
        self.health = Some(digest.into());
        self
    }

    pub fn stats(&self) -> Arc<MockStats> {
        self.stats.clone()
    }
}

#[async_trait]
impl Backend for MockBackend {
    async fn chat(
        &self,
        _endpoint: &EndpointSpec,
        request: &ChatRequest,
    ) -> Result<String, TransportError> {
        let _guard = self.stats.enter();
        self.stats
            .seen
            .lock()
            .expect("stats poisoned")
            .push(request.clone());
        if !self.delay.is_zero() {
            tokio::time::sleep(self.delay).await;
        }
        self.behavior.respond(request)
    }

    async fn embed(
        &self,
        _endpoint: &EndpointSpec,
        texts: &[String],
    ) -> Result<Vec<Vec<f64>>, TransportError> {
        let _guard = self.stats.enter();
        Ok(texts
            .iter()
            .map(|t| hashed_bow(t, self.embedding_dim, self.embedding_seed))
            .collect())
    }

    async fn health(&self, _endpoint: &EndpointSpec) -> Result<Value, TransportError> {
        Ok(json!({"status": "ok", "checkpoint_digest": self.health}))
    }
}
