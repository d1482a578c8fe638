//! Attacker-based leakage evaluation: the attacker ranks a pool holding the
//! true source segment among decoys; ASR@k and MRR summarize the ranks.

use futures::future::try_join_all;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacker::{reconstruct_text, serialize_group};
use crate::llm_client::{ClientError, EndpointSpec, LlmClient};
use crate::textmetrics::{rouge_l, sim, MetricError, SimBackend};
use crate::types::{CandidatePool, SubQueryGroup};

/// Decoys at or above this ROUGE-L F1 against the true segment are excluded.
pub const NEAR_DUPLICATE_F1: f64 = 0.6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need {needed} eligible decoys, corpus offers {available}")]
    InsufficientDecoys { needed: usize, available: usize },
    #[error("pool size must be at least 2 (got {0})")]
    PoolTooSmall(usize),
    #[error("pool {0} has no ranking")]
    UnrankedPool(String),
    #[error("pool {0} is already ranked")]
    AlreadyRanked(String),
    #[error("k={k} outside 1..={max}")]
    InvalidK { k: usize, max: usize },
    #[error("no pools to score")]
    Empty,
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// What the attacker observed for an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observation {
    Text(String),
    Group(SubQueryGroup),
}

impl Observation {
    pub fn render(&self) -> String {
        match self {
            Observation::Text(t) => t.clone(),
            Observation::Group(g) => serialize_group(g),
        }
    }
}

/// Builds an unranked pool of `n` candidates: the true segment plus `n - 1`
/// decoys drawn uniformly without replacement from non-near-duplicate
/// corpus entries, with the true segment at a seeded position.
pub fn build_pool(
    instance_id: &str,
    true_segment: &str,
    corpus: &[String],
    n: usize,
    seed: u64,
) -> Result<CandidatePool, EvalError> {
    if n < 2 {
        return Err(EvalError::PoolTooSmall(n));
    }
    let eligible: Vec<&String> = corpus
        .iter()
        .filter(|c| c.as_str() != true_segment && rouge_l(c, true_segment).f1 < NEAR_DUPLICATE_F1)
        .collect();
    if eligible.len() < n - 1 {
        return Err(EvalError::InsufficientDecoys {
            needed: n - 1,
            available: eligible.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let decoys: Vec<String> = eligible
        .choose_multiple(&mut rng, n - 1)
        .map(|s| (*s).clone())
        .collect();
    let true_position = rng.gen_range(0..n);
    Ok(CandidatePool {
        instance_id: instance_id.to_owned(),
        true_segment: true_segment.to_owned(),
        decoys,
        true_position,
        ranking: None,
        true_rank: None,
    })
}

/// Pool indices ordered by descending score; equal scores keep pool order.
pub fn rank_by_scores(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Ranks the pool by similarity of each candidate to the attacker's single
/// greedy reconstruction of `observed`.
pub async fn rank_candidates(
    observed: &Observation,
    pool: CandidatePool,
    attacker: &EndpointSpec,
    backend: &SimBackend,
    max_tokens: u32,
    client: &LlmClient,
) -> Result<CandidatePool, EvalError> {
    if pool.ranking.is_some() {
        return Err(EvalError::AlreadyRanked(pool.instance_id));
    }
    let q_hat = reconstruct_text(&observed.render(), attacker, max_tokens, client).await?;
    let scores = try_join_all(
        pool.candidates()
            .into_iter()
            .map(|c| sim(&q_hat, c, backend, client)),
    )
    .await?;
    Ok(pool.clone().with_ranking(rank_by_scores(&scores)))
}

fn ranks(pools: &[CandidatePool]) -> Result<Vec<usize>, EvalError> {
    if pools.is_empty() {
        return Err(EvalError::Empty);
    }
    pools
        .iter()
        .map(|p| p.true_rank.ok_or_else(|| EvalError::UnrankedPool(p.instance_id.clone())))
        .collect()
}

/// Fraction of pools whose true segment is ranked within the top `k`.
pub fn asr_at_k(pools: &[CandidatePool], k: usize) -> Result<f64, EvalError> {
    let ranks = ranks(pools)?;
    let max = pools.iter().map(CandidatePool::size).min().unwrap_or(0);
    if k == 0 || k > max {
        return Err(EvalError::InvalidK { k, max });
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Mean reciprocal rank of the true segment.
pub fn mrr(pools: &[CandidatePool]) -> Result<f64, EvalError> {
    let ranks = ranks(pools)?;
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "asr@1")]
    pub asr_at_1: f64,
    #[serde(rename = "asr@3")]
    pub asr_at_3: Option<f64>,
    /// ASR at every requested k, keyed `asr@<k>`.
    pub asr: std::collections::BTreeMap<String, f64>,
    pub mrr: f64,
    pub seed: u64,
    pub config_digest: String,
}

impl EvalReport {
    pub fn from_pools(
        method: &str,
        pools: &[CandidatePool],
        k_list: &[usize],
        seed: u64,
        config_digest: &str,
    ) -> Result<Self, EvalError> {
        let n = pools.iter().map(CandidatePool::size).min().ok_or(EvalError::Empty)?;
        let mut asr = std::collections::BTreeMap::new();
        for &k in k_list {
            asr.insert(format!("asr@{k}"), asr_at_k(pools, k)?);
        }
        Ok(Self {
            method: method.to_owned(),
            m: pools.len(),
            n,
            asr_at_1: asr_at_k(pools, 1)?,
            asr_at_3: (n >= 3).then(|| asr_at_k(pools, 3)).transpose()?,
            asr,
            mrr: mrr(pools)?,
            seed,
            config_digest: config_digest.to_owned(),
        })
    }
}
