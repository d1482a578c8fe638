//! Text similarity metrics: ROUGE-1/2/L, a synonym-free METEOR, cosine
//! similarity and the pluggable `Sim` used by the quality and leakage terms.
//!
//! The lexical metrics are pure functions over the shared tokenizer. `sim`
//! in embedding mode goes through [`LlmClient`] and is therefore async.

use std::collections::HashMap;
use std::sync::OnceLock;

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm_client::{ClientError, EndpointKind, EndpointSpec, LlmClient};
use crate::types::clamp_unit;

const METEOR_ALPHA: f64 = 0.9;
const METEOR_BETA: f64 = 3.0;
const METEOR_GAMMA: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("n-gram order {0} is not supported (expected 1 or 2)")]
    UnsupportedOrder(usize),
    #[error("vector dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("cosine similarity of a zero vector is undefined")]
    ZeroVector,
    #[error("embedding mode requires an embedding endpoint")]
    MissingEmbeddingEndpoint,
    #[error("quality requires a reference answer")]
    MissingReference,
    #[error(transparent)]
    Client(#[from] ClientError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricScore {
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
        }
    }

    fn perfect() -> Self {
        Self {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        }
    }
}

/// Lowercased word tokens. Punctuation is dropped, but hyphens and
/// apostrophes between two alphanumeric characters stay inside the token.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else if (c == '-' || c == '\'')
            && !current.is_empty()
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric())
        {
            current.push(c);
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

fn ngram_counts<'a, T: AsRef<str>>(tokens: &'a [T], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            let key: Vec<&str> = window.iter().map(AsRef::as_ref).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap on pre-tokenized input.
///
/// When neither side has an n-gram of order `n`, the score is perfect iff the
/// token sequences are equal and zero otherwise.
pub fn rouge_n_tokens<T: AsRef<str>>(
    candidate: &[T],
    reference: &[T],
    n: usize,
) -> Result<MetricScore, MetricError> {
    if !(1..=2).contains(&n) {
        return Err(MetricError::UnsupportedOrder(n));
    }
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let cand_total: usize = cand.values().sum();
    let ref_total: usize = refs.values().sum();
    if cand_total == 0 && ref_total == 0 {
        return Ok(if same_tokens(candidate, reference) {
            MetricScore::perfect()
        } else {
            MetricScore::default()
        });
    }
    let overlap: usize = cand
        .iter()
        .map(|(gram, &c)| c.min(refs.get(gram).copied().unwrap_or(0)))
        .sum();
    Ok(MetricScore::from_pr(
        ratio(overlap, cand_total),
        ratio(overlap, ref_total),
    ))
}

pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Result<MetricScore, MetricError> {
    rouge_n_tokens(&tokenize(candidate), &tokenize(reference), n)
}

/// Length of the longest common subsequence, O(|a|·|b|) time, O(|b|) space.
pub fn lcs_len<T: AsRef<str>>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens<T: AsRef<str>>(candidate: &[T], reference: &[T]) -> MetricScore {
    if candidate.is_empty() && reference.is_empty() {
        return MetricScore::perfect();
    }
    let lcs = lcs_len(candidate, reference);
    MetricScore::from_pr(
        ratio(lcs, candidate.len()),
        ratio(lcs, reference.len()),
    )
}

pub fn rouge_l(candidate: &str, reference: &str) -> MetricScore {
    rouge_l_tokens(&tokenize(candidate), &tokenize(reference))
}

fn same_tokens<T: AsRef<str>>(a: &[T], b: &[T]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.as_ref() == y.as_ref())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn stemmer() -> &'static Stemmer {
    static STEMMER: OnceLock<Stemmer> = OnceLock::new();
    STEMMER.get_or_init(|| Stemmer::create(Algorithm::English))
}

pub fn stem(token: &str) -> String {
    stemmer().stem(token).into_owned()
}

/// METEOR without synonym matching: exact matches first, then Snowball-stem
/// matches over the leftovers, combined as
/// `Fmean · (1 − γ·(chunks/m)^β)` with `Fmean = PR / (αP + (1−α)R)`.
///
/// Identical inputs of `m` tokens score `1 − γ/m³`, the minimum penalty.
pub fn meteor_lite(candidate: &str, reference: &str) -> f64 {
    meteor_tokens(&tokenize(candidate), &tokenize(reference))
}

pub fn meteor_tokens<T: AsRef<str>>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut cand_match: Vec<Option<usize>> = vec![None; candidate.len()];
    let mut ref_used = vec![false; reference.len()];

    let align = |keys_c: &[String],
                 keys_r: &[String],
                 cand_match: &mut Vec<Option<usize>>,
                 ref_used: &mut Vec<bool>| {
        for (i, key) in keys_c.iter().enumerate() {
            if cand_match[i].is_some() {
                continue;
            }
            if let Some(j) = (0..keys_r.len()).find(|&j| !ref_used[j] && keys_r[j] == *key) {
                cand_match[i] = Some(j);
                ref_used[j] = true;
            }
        }
    };

    let exact_c: Vec<String> = candidate.iter().map(|t| t.as_ref().to_owned()).collect();
    let exact_r: Vec<String> = reference.iter().map(|t| t.as_ref().to_owned()).collect();
    align(&exact_c, &exact_r, &mut cand_match, &mut ref_used);
    let stem_c: Vec<String> = exact_c.iter().map(|t| stem(t)).collect();
    let stem_r: Vec<String> = exact_r.iter().map(|t| stem(t)).collect();
    align(&stem_c, &stem_r, &mut cand_match, &mut ref_used);

    let matches: Vec<(usize, usize)> = cand_match
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|j| (i, j)))
        .collect();
    let m = matches.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + matches
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();

    let precision = m as f64 / candidate.len() as f64;
    let recall = m as f64 / reference.len() as f64;
    let fmean = precision * recall / (METEOR_ALPHA * precision + (1.0 - METEOR_ALPHA) * recall);
    let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_BETA);
    fmean * (1.0 - penalty)
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::DimensionMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(MetricError::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    #[default]
    EmbeddingCosine,
    RougeLF1,
}

/// Which similarity function backs `Sim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimBackend {
    pub mode: SimMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_endpoint: Option<EndpointSpec>,
}

impl SimBackend {
    pub fn rouge_l() -> Self {
        Self {
            mode: SimMode::RougeLF1,
            embedding_endpoint: None,
        }
    }

    pub fn embedding(endpoint: EndpointSpec) -> Self {
        Self {
            mode: SimMode::EmbeddingCosine,
            embedding_endpoint: Some(endpoint),
        }
    }

    pub fn is_valid(&self) -> bool {
        match self.mode {
            SimMode::EmbeddingCosine => self
                .embedding_endpoint
                .as_ref()
                .is_some_and(|e| e.kind == EndpointKind::Embedding),
            SimMode::RougeLF1 => self.embedding_endpoint.is_none(),
        }
    }
}

/// Similarity in `[0, 1]`. Cosine is rescaled as `(x + 1) / 2`; identical
/// (after trimming) inputs short-circuit to 1 and a side without any token
/// scores 0 in embedding mode.
pub async fn sim(
    a: &str,
    b: &str,
    backend: &SimBackend,
    client: &LlmClient,
) -> Result<f64, MetricError> {
    let (a, b) = (a.trim(), b.trim());
    if a == b {
        return Ok(1.0);
    }
    match backend.mode {
        SimMode::RougeLF1 => Ok(clamp_unit(rouge_l(a, b).f1)),
        SimMode::EmbeddingCosine => {
            let endpoint = backend
                .embedding_endpoint
                .as_ref()
                .ok_or(MetricError::MissingEmbeddingEndpoint)?;
            if tokenize(a).is_empty() || tokenize(b).is_empty() {
                return Ok(0.0);
            }
            let vectors = client
                .embed(endpoint, &[a.to_owned(), b.to_owned()])
                .await?;
            let cos = cosine_sim(&vectors[0], &vectors[1])?;
            Ok(clamp_unit((cos + 1.0) / 2.0))
        }
    }
}

/// Quality of an integrated answer against the reference answer.
pub async fn quality_score(
    integrated: &str,
    reference: Option<&str>,
    backend: &SimBackend,
    client: &LlmClient,
) -> Result<f64, MetricError> {
    let reference = reference.ok_or(MetricError::MissingReference)?;
    sim(integrated, reference, backend, client).await
}

/// Leakage of a reconstruction against the original query; 1 is a full breach.
pub async fn leakage_score(
    original: &str,
    reconstructed: &str,
    backend: &SimBackend,
    client: &LlmClient,
) -> Result<f64, MetricError> {
    sim(original, reconstructed, backend, client).await
}
