//! QA dataset construction: generation from source documents, judge
//! scoring, score filter, question-level near-duplicate removal, split.

use std::sync::{Arc, LazyLock};

use futures::future::join_all;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::llm_client::{ChatMessage, ClientError, EndpointSpec, LlmClient};
use crate::textmetrics::rouge_l;
use crate::types::DecodingParams;

static NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"-?\d+(?:\.\d+)?").expect("valid regex"));

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    pub source_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_score: Option<f64>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("document {0} has empty text")]
    EmptyDocument(String),
    #[error("pairs_per_doc must be >= 1")]
    NoPairsRequested,
    #[error("judge reply is not a score: {0:?}")]
    UnparseableScore(String),
    #[error("split ratio must lie in (0, 1), got {0}")]
    InvalidRatio(f64),
    #[error(transparent)]
    Client(#[from] ClientError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub pairs_per_doc: usize,
    /// Pairs must score strictly above this.
    pub score_threshold: f64,
    /// Question-level ROUGE-L F1 at or above which a pair is a duplicate.
    pub dup_threshold: f64,
    pub split_ratio: f64,
    pub worker_cap: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            pairs_per_doc: 3,
            score_threshold: 4.0,
            dup_threshold: 0.9,
            split_ratio: 0.8,
            worker_cap: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaGeneration {
    pub pairs: Vec<QaPair>,
    pub warnings: Vec<String>,
}

pub fn qa_prompt(doc: &SourceDocument, pairs_per_doc: usize) -> String {
    format!(
        "DOCUMENT:\n{}\n\nWrite exactly {pairs_per_doc} question-answer pairs that can be answered \
from the DOCUMENT alone. Format each pair as two lines, `Q: <question>` then `A: <answer>`, \
and separate pairs with a blank line.",
        doc.text.trim()
    )
}

/// `Q:`/`A:` pairs in order of appearance. A `Q:` line must be followed by
/// an `A:` line (blank lines allowed between); anything else is reported.
pub fn parse_qa_blocks(text: &str) -> (Vec<(String, String)>, usize) {
    let mut pairs = Vec::new();
    let mut malformed = 0;
    let mut pending: Option<String> = None;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if let Some(q) = line.strip_prefix("Q:") {
            if pending.replace(q.trim().to_owned()).is_some() {
                malformed += 1;
            }
        } else if let Some(a) = line.strip_prefix("A:") {
            match pending.take() {
                Some(q) if !q.is_empty() && !a.trim().is_empty() => pairs.push((q, a.trim().to_owned())),
                _ => malformed += 1,
            }
        }
    }
    if pending.is_some() {
        malformed += 1;
    }
    (pairs, malformed)
}

pub async fn generate_qa(
    doc: &SourceDocument,
    endpoint: &EndpointSpec,
    pairs_per_doc: usize,
    decoding: &DecodingParams,
    client: &LlmClient,
) -> Result<QaGeneration, DatasetError> {
    if doc.text.trim().is_empty() {
        return Err(DatasetError::EmptyDocument(doc.id.clone()));
    }
    if pairs_per_doc == 0 {
        return Err(DatasetError::NoPairsRequested);
    }
    let messages = [ChatMessage::user(qa_prompt(doc, pairs_per_doc))];
    let text = client.chat(endpoint, &messages, decoding).await?.text;
    let (parsed, malformed) = parse_qa_blocks(&text);
    let mut warnings = Vec::new();
    if parsed.len() < pairs_per_doc || malformed > 0 {
        let w = format!(
            "document {}: parsed {} of {} requested pairs ({} malformed blocks)",
            doc.id,
            parsed.len().min(pairs_per_doc),
            pairs_per_doc,
            malformed
        );
        tracing::warn!("{w}");
        warnings.push(w);
    }
    let pairs = parsed
        .into_iter()
        .take(pairs_per_doc)
        .map(|(question, answer)| QaPair {
            question,
            answer,
            source_id: doc.id.clone(),
            judge_score: None,
        })
        .collect();
    Ok(QaGeneration { pairs, warnings })
}

pub fn judge_prompt(pair: &QaPair) -> String {
    format!(
        "Score the following question-answer pair from 0 to 5 for correctness, clarity and \
usefulness as a domain question. Reply with a single number.\n\nQUESTION: {}\nANSWER: {}",
        pair.question, pair.answer
    )
}

/// First number in `reply`, clamped to `[0, 5]`.
pub fn parse_score(reply: &str) -> Option<f64> {
    NUMBER
        .find(reply)
        .and_then(|m| m.as_str().parse::<f64>().ok())
        .filter(|x| x.is_finite())
        .map(|x| x.clamp(0.0, 5.0))
}

pub async fn judge_score(
    pair: &QaPair,
    endpoint: &EndpointSpec,
    client: &LlmClient,
) -> Result<f64, DatasetError> {
    let decoding = DecodingParams::greedy(16);
    let mut messages = vec![ChatMessage::user(judge_prompt(pair))];
    let first = client.chat(endpoint, &messages, &decoding).await?.text;
    if let Some(s) = parse_score(&first) {
        return Ok(s);
    }
    messages.push(ChatMessage::assistant(first));
    messages.push(ChatMessage::user("Reply with only a number between 0 and 5."));
    let second = client.chat(endpoint, &messages, &decoding).await?.text;
    parse_score(&second).ok_or(DatasetError::UnparseableScore(second))
}

/// Keeps pairs scoring strictly above `score_threshold`, then drops every
/// pair whose question is a near-duplicate of an earlier kept question.
pub fn filter_and_dedup(pairs: &[QaPair], score_threshold: f64, dup_threshold: f64) -> Vec<QaPair> {
    let mut kept: Vec<QaPair> = Vec::new();
    for p in pairs {
        if !p.judge_score.is_some_and(|s| s > score_threshold) {
            continue;
        }
        if kept
            .iter()
            .any(|k| rouge_l(&p.question, &k.question).f1 >= dup_threshold)
        {
            continue;
        }
        kept.push(p.clone());
    }
    kept
}

/// Seeded shuffle, then the first `round(ratio * len)` items are train.
pub fn split<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), DatasetError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::InvalidRatio(ratio));
    }
    let mut shuffled = items.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratio * items.len() as f64).round() as usize;
    let test = shuffled.split_off(n_train);
    Ok((shuffled, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    pub train: usize,
    pub test: usize,
    pub avg_question_words: f64,
    pub avg_answer_words: f64,
}

impl DatasetStats {
    pub fn compute(all: &[QaPair], train: usize, test: usize) -> Self {
        let avg = |f: fn(&QaPair) -> &str| {
            if all.is_empty() {
                0.0
            } else {
                all.iter().map(|p| f(p).split_whitespace().count()).sum::<usize>() as f64 / all.len() as f64
            }
        };
        Self {
            total: all.len(),
            train,
            test,
            avg_question_words: avg(|p| &p.question),
            avg_answer_words: avg(|p| &p.answer),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetBuild {
    pub generated: usize,
    pub kept: Vec<QaPair>,
    pub train: Vec<QaPair>,
    pub test: Vec<QaPair>,
    pub stats: DatasetStats,
    pub warnings: Vec<String>,
}

/// Generates and judges pairs for every document (bounded concurrency),
/// then filters, deduplicates and splits. Output order follows input order.
pub async fn build_dataset(
    docs: &[SourceDocument],
    generator: &EndpointSpec,
    judge: &EndpointSpec,
    cfg: &DatasetConfig,
    decoding: &DecodingParams,
    seed: u64,
    client: &LlmClient,
) -> Result<DatasetBuild, DatasetError> {
    let workers = Arc::new(Semaphore::new(cfg.worker_cap.max(1)));
    let per_doc = join_all(docs.iter().map(|doc| {
        let workers = workers.clone();
        async move {
            let _permit = workers.acquire_owned().await.expect("semaphore open");
            let mut generation = generate_qa(doc, generator, cfg.pairs_per_doc, decoding, client).await?;
            for pair in &mut generation.pairs {
                match judge_score(pair, judge, client).await {
                    Ok(s) => pair.judge_score = Some(s),
                    Err(DatasetError::UnparseableScore(reply)) => {
                        generation
                            .warnings
                            .push(format!("document {}: unscored pair dropped ({reply:?})", doc.id));
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok::<_, DatasetError>(generation)
        }
    }))
    .await;
    let mut all = Vec::new();
    let mut warnings = Vec::new();
    for g in per_doc {
        let g = g?;
        all.extend(g.pairs);
        warnings.extend(g.warnings);
    }
    let kept = filter_and_dedup(&all, cfg.score_threshold, cfg.dup_threshold);
    let (train, test) = split(&kept, cfg.split_ratio, seed)?;
    let stats = DatasetStats::compute(&kept, train.len(), test.len());
    Ok(DatasetBuild {
        generated: all.len(),
        kept,
        train,
        test,
        stats,
        warnings,
    })
}
