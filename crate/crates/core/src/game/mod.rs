//! The alternating generator/attacker game: candidate sampling, reward,
//! preference construction, round orchestration and dataset emission.

mod events;
mod handshake;
mod inference;
mod preference;
mod prompt;
mod round;
mod training;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attacker::AttackerError;
use crate::integrator::IntegrationError;
use crate::llm_client::ClientError;
use crate::textmetrics::MetricError;

pub use events::{Event, EventKind, EventLog};
pub use handshake::{acknowledge, await_attacker, file_digest, HandshakeConfig, READY_FILE};
pub use inference::{ask, Inference};
pub use preference::build_preference_pair;
pub use prompt::{generation_prompt, parse_numbered_list, reformat_request};
pub use round::{
    evaluate_candidate, run_round, sample_candidates, DpoLine, GameContext, GameEndpoints,
    RewardLine, SftLine,
};
pub use training::{run_training, sample_batch, RunOptions};

/// Hyperparameters of the game loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GameConfig {
    /// Candidate groups sampled per query.
    pub k: usize,
    /// Sub-queries per group.
    pub n: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Number of rounds.
    pub t: usize,
    pub tie_epsilon: f64,
    pub min_surviving_candidates: usize,
    pub batch_size: usize,
    /// Upper bound on concurrently evaluated candidates.
    pub worker_cap: usize,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            k: 4,
            n: 9,
            alpha: 2.0 / 3.0,
            beta: 1.0 / 3.0,
            t: 5,
            tie_epsilon: 1e-6,
            min_surviving_candidates: 2,
            batch_size: 64,
            worker_cap: 16,
        }
    }
}

impl GameConfig {
    pub fn validate(&self) -> Result<(), String> {
        let mut problems = Vec::new();
        if self.k < 2 {
            problems.push(format!("k must be >= 2 (got {})", self.k));
        }
        if self.n < 1 {
            problems.push("n must be >= 1".to_owned());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            problems.push(format!("alpha must be a finite value >= 0 (got {})", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            problems.push(format!("beta must be a finite value >= 0 (got {})", self.beta));
        }
        if self.t < 1 {
            problems.push("t must be >= 1".to_owned());
        }
        if !(self.tie_epsilon >= 0.0) {
            problems.push("tie_epsilon must be >= 0".to_owned());
        }
        if self.min_surviving_candidates < 2 {
            problems.push("min_surviving_candidates must be >= 2".to_owned());
        }
        if self.batch_size < 1 {
            problems.push("batch_size must be >= 1".to_owned());
        }
        if self.worker_cap < 1 {
            problems.push("worker_cap must be >= 1".to_owned());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join("; "))
        }
    }
}

#[derive(Debug, Error)]
pub enum GameError {
    #[error("invalid game configuration: {0}")]
    InvalidConfig(String),
    #[error("generator output for query {query_id} did not yield {n} sub-queries after a reprompt")]
    ParseFailure { query_id: String, n: usize },
    #[error("endpoint {0} must be trusted for this role")]
    TrustViolation(String),
    #[error("query {0} has no reference answer")]
    MissingReference(String),
    #[error("candidate {candidate_index} of query {query_id} dropped: {reason}")]
    CandidateDropped {
        query_id: String,
        candidate_index: usize,
        reason: String,
    },
    #[error("attacker checkpoint for round {round} not acknowledged within {waited_ms} ms")]
    AttackerNotUpdated { round: usize, waited_ms: u64 },
    #[error("run {0} already exists; pass resume to continue it")]
    RunExists(String),
    #[error("configuration differs from the snapshot recorded for run {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Integration(#[from] IntegrationError),
    #[error(transparent)]
    Attacker(#[from] AttackerError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// `alpha * quality - beta * leakage`.
pub fn compute_reward(quality: f64, leakage: f64, alpha: f64, beta: f64) -> f64 {
    alpha * quality - beta * leakage
}

/// Stable 64-bit seed derived from labelled parts.
pub fn derive_seed(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0x1f]);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
