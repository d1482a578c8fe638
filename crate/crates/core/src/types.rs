//! Domain value types shared by every stage of the pipeline.
//!
//! Everything here is plain data: no I/O, no clocks. Field names are the
//! wire names used in the JSON-lines datasets and reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Biomedical,
    Legal,
    #[default]
    Other,
}

/// A private user query together with its optional gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitiveQuery {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub domain_tag: DomainTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_answer: Option<String>,
}

impl SensitiveQuery {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            domain_tag: DomainTag::Other,
            reference_answer: None,
        }
    }

    pub fn with_reference(mut self, answer: impl Into<String>) -> Self {
        self.reference_answer = Some(answer.into());
        self
    }

    pub fn with_domain(mut self, tag: DomainTag) -> Self {
        self.domain_tag = tag;
        self
    }

    pub fn is_valid(&self) -> bool {
        !self.text.trim().is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubQuery {
    pub index: usize,
    pub text: String,
}

/// Sampling parameters for a chat completion.
///
/// `seed` is optional and only sent on the wire when set; candidate sampling
/// uses it so that K draws for the same prompt stay distinct under caching.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_p: 0.9,
            max_tokens: 512,
            seed: None,
        }
    }
}

impl DecodingParams {
    /// Deterministic decoding used for attacks.
    pub fn greedy(max_tokens: u32) -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            max_tokens,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn is_valid(&self) -> bool {
        self.temperature >= 0.0
            && self.temperature.is_finite()
            && self.top_p > 0.0
            && self.top_p <= 1.0
            && self.max_tokens > 0
    }
}

/// One candidate decomposition of a query into sub-queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubQueryGroup {
    pub query_id: String,
    pub candidate_index: usize,
    pub subqueries: Vec<SubQuery>,
    pub round: usize,
    pub decoding: DecodingParams,
}

impl SubQueryGroup {
    /// Builds a group with contiguous indices from plain texts.
    pub fn from_texts<I, S>(
        query_id: impl Into<String>,
        candidate_index: usize,
        round: usize,
        decoding: DecodingParams,
        texts: I,
    ) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let subqueries = texts
            .into_iter()
            .enumerate()
            .map(|(index, text)| SubQuery {
                index,
                text: text.into(),
            })
            .collect();
        Self {
            query_id: query_id.into(),
            candidate_index,
            subqueries,
            round,
            decoding,
        }
    }

    pub fn len(&self) -> usize {
        self.subqueries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subqueries.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.subqueries.iter().map(|s| s.text.as_str())
    }

    /// Numbered-list rendering, the same shape the generator is asked to emit.
    pub fn to_numbered_list(&self) -> String {
        self.subqueries
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{}. {}", i + 1, s.text))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// True iff the group holds exactly `n` nonempty sub-queries indexed `0..n`.
pub fn validate_group(group: &SubQueryGroup, n: usize) -> bool {
    group.subqueries.len() == n
        && group
            .subqueries
            .iter()
            .enumerate()
            .all(|(i, s)| s.index == i && !s.text.trim().is_empty())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalResponse {
    pub subquery_index: usize,
    pub text: String,
    pub endpoint_id: String,
    pub latency_ms: u64,
    pub cached: bool,
}

/// Per-candidate outcome of the quality/leakage evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub candidate_index: usize,
    pub quality: f64,
    pub leakage: f64,
    pub alpha: f64,
    pub beta: f64,
    pub reward: f64,
    pub integrated_answer: String,
    pub reconstructed_query: String,
}

impl RewardRecord {
    /// Builds a record, clamping both terms to `[0, 1]` before combining.
    pub fn new(
        candidate_index: usize,
        quality: f64,
        leakage: f64,
        alpha: f64,
        beta: f64,
        integrated_answer: String,
        reconstructed_query: String,
    ) -> Self {
        let quality = clamp_unit(quality);
        let leakage = clamp_unit(leakage);
        Self {
            candidate_index,
            quality,
            leakage,
            alpha,
            beta,
            reward: alpha * quality - beta * leakage,
            integrated_answer,
            reconstructed_query,
        }
    }

    pub fn is_consistent(&self) -> bool {
        (self.reward - (self.alpha * self.quality - self.beta * self.leakage)).abs() <= 1e-9
            && (0.0..=1.0).contains(&self.quality)
            && (0.0..=1.0).contains(&self.leakage)
    }
}

pub fn clamp_unit(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

/// A best-versus-worst preference over candidate groups of one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub query_id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub chosen_reward: f64,
    pub rejected_reward: f64,
    pub chosen_index: usize,
    pub rejected_index: usize,
}

impl PreferencePair {
    pub fn is_valid(&self) -> bool {
        self.chosen_reward >= self.rejected_reward && self.chosen_index != self.rejected_index
    }
}

/// Attacker training example: serialized sub-queries mapped back to the query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconstructionSample {
    pub input: String,
    pub target: String,
}

/// A true segment hidden among decoys, optionally ranked by an attacker.
///
/// Pool order is `decoys` with `true_segment` inserted at `true_position`;
/// `ranking` lists pool indices best-first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub instance_id: String,
    pub true_segment: String,
    pub decoys: Vec<String>,
    pub true_position: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranking: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_rank: Option<usize>,
}

impl CandidatePool {
    pub fn size(&self) -> usize {
        self.decoys.len() + 1
    }

    /// All candidates in pool order.
    pub fn candidates(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.decoys.iter().map(String::as_str).collect();
        out.insert(self.true_position, self.true_segment.as_str());
        out
    }

    pub fn is_ranked(&self) -> bool {
        self.ranking.is_some() && self.true_rank.is_some()
    }

    /// Attaches a best-first ranking of pool indices and derives `true_rank`.
    pub fn with_ranking(mut self, ranking: Vec<usize>) -> Self {
        let rank = ranking
            .iter()
            .position(|&i| i == self.true_position)
            .map(|p| p + 1);
        self.true_rank = rank;
        self.ranking = Some(ranking);
        self
    }

    pub fn is_consistent(&self) -> bool {
        let n = self.size();
        if self.true_position >= n {
            return false;
        }
        let occurrences = self
            .candidates()
            .iter()
            .filter(|c| **c == self.true_segment)
            .count();
        if occurrences != 1 {
            return false;
        }
        match (&self.ranking, self.true_rank) {
            (None, None) => true,
            (Some(ranking), Some(rank)) => {
                let mut seen = vec![false; n];
                for &i in ranking {
                    if i >= n || seen[i] {
                        return false;
                    }
                    seen[i] = true;
                }
                ranking.len() == n
                    && (1..=n).contains(&rank)
                    && ranking[rank - 1] == self.true_position
            }
            _ => false,
        }
    }
}

/// Record of one training run, persisted as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    /// Next round to execute; equals the number of completed rounds.
    pub round: usize,
    pub config_snapshot: serde_json::Value,
    pub artifact_paths: BTreeMap<String, String>,
    pub timestamps: BTreeMap<String, String>,
    #[serde(default)]
    pub rounds: Vec<RoundArtifacts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RoundCounts {
    pub queries: usize,
    pub pairs_emitted: usize,
    pub pairs_skipped: usize,
    pub candidates_dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundArtifacts {
    pub round: usize,
    pub sft_dataset_path: String,
    pub dpo_dataset_path: String,
    pub reward_log_path: String,
    pub counts: RoundCounts,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped_queries: Vec<SkippedQuery>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedQuery {
    pub query_id: String,
    pub reason: String,
}
