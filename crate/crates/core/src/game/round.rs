//! One round: attacker data first, then the barrier, then generator rewards.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use super::events::{EventKind, EventLog};
use super::handshake::{acknowledge, await_attacker, file_digest, HandshakeConfig};
use super::preference::build_preference_pair;
use super::prompt::{generation_prompt, parse_numbered_list, reformat_request};
use super::{derive_seed, GameConfig, GameError};
use crate::attacker::{emit_sft_samples, reconstruct};
use crate::integrator::{integrate, IntegrationRequest};
use crate::llm_client::{ChatMessage, ClientError, EndpointSpec, LlmClient, OutboundGuard, Trust};
use crate::persist::write_jsonl;
use crate::textmetrics::{leakage_score, quality_score, SimBackend};
use crate::types::{
    DecodingParams, RewardRecord, RoundArtifacts, RoundCounts, SensitiveQuery, SkippedQuery,
    SubQueryGroup,
};

/// The four chat endpoints taking part in the game.
#[derive(Debug, Clone)]
pub struct GameEndpoints {
    pub generator: EndpointSpec,
    pub external: EndpointSpec,
    pub integrator: EndpointSpec,
    pub attacker: EndpointSpec,
}

/// Everything a round needs besides its batch.
#[derive(Debug, Clone)]
pub struct GameContext {
    pub client: LlmClient,
    pub endpoints: GameEndpoints,
    pub sim: SimBackend,
    pub decoding: DecodingParams,
    pub cfg: GameConfig,
    pub handshake: HandshakeConfig,
    pub seed: u64,
    /// Resolved configuration recorded in the run manifest; resume refuses
    /// to continue a run whose snapshot differs.
    pub snapshot: Value,
}

impl GameContext {
    pub fn new(client: LlmClient, endpoints: GameEndpoints, sim: SimBackend, cfg: GameConfig) -> Self {
        let mut ctx = Self {
            client,
            endpoints,
            sim,
            decoding: DecodingParams::default(),
            cfg,
            handshake: HandshakeConfig::default(),
            seed: 0,
            snapshot: Value::Null,
        };
        ctx.snapshot = ctx.default_snapshot();
        ctx
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.snapshot = self.default_snapshot();
        self
    }

    pub fn with_decoding(mut self, decoding: DecodingParams) -> Self {
        self.decoding = decoding;
        self.snapshot = self.default_snapshot();
        self
    }

    pub fn with_handshake(mut self, handshake: HandshakeConfig) -> Self {
        self.handshake = handshake;
        self
    }

    pub fn with_snapshot(mut self, snapshot: Value) -> Self {
        self.snapshot = snapshot;
        self
    }

    fn default_snapshot(&self) -> Value {
        let ids = |e: &EndpointSpec| json!({ "id": e.id, "model_name": e.model_name, "trust": e.trust });
        json!({
            "game": self.cfg,
            "decoding": self.decoding,
            "sim": self.sim,
            "seed": self.seed,
            "endpoints": {
                "generator": ids(&self.endpoints.generator),
                "external": ids(&self.endpoints.external),
                "integrator": ids(&self.endpoints.integrator),
                "attacker": ids(&self.endpoints.attacker),
            },
        })
    }
}

/// Attacker training line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftLine {
    pub input: String,
    pub target: String,
    pub query_id: String,
    pub candidate_index: usize,
    pub round: usize,
}

/// Generator preference line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoLine {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub chosen_reward: f64,
    pub rejected_reward: f64,
    pub query_id: String,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardLine {
    pub round: usize,
    pub query_id: String,
    #[serde(flatten)]
    pub record: RewardRecord,
}

/// Samples and parses one candidate group; reprompts once on a parse failure.
pub(super) async fn sample_group(
    ctx: &GameContext,
    query: &SensitiveQuery,
    round: usize,
    k: usize,
) -> Result<SubQueryGroup, GameError> {
    let generator = &ctx.endpoints.generator;
    if generator.trust != Trust::Trusted {
        return Err(GameError::TrustViolation(generator.id.clone()));
    }
    let n = ctx.cfg.n;
    let seed = derive_seed(&[
        "candidate",
        &ctx.seed.to_string(),
        &round.to_string(),
        &query.id,
        &k.to_string(),
    ]);
    let decoding = ctx.decoding.with_seed(seed);
    let mut messages = vec![ChatMessage::user(generation_prompt(&query.text, n))];
    let first = ctx.client.chat(generator, &messages, &decoding).await?.text;
    let texts = match parse_numbered_list(&first, n) {
        Some(t) => t,
        None => {
            tracing::debug!(query = %query.id, k, "reprompting generator");
            messages.push(ChatMessage::assistant(first));
            messages.push(ChatMessage::user(reformat_request(n)));
            let second = ctx.client.chat(generator, &messages, &decoding).await?.text;
            parse_numbered_list(&second, n).ok_or_else(|| GameError::ParseFailure {
                query_id: query.id.clone(),
                n,
            })?
        }
    };
    Ok(SubQueryGroup::from_texts(query.id.clone(), k, round, decoding, texts))
}

/// K candidate groups for `query`, in candidate order.
pub async fn sample_candidates(
    ctx: &GameContext,
    query: &SensitiveQuery,
    round: usize,
) -> Result<Vec<SubQueryGroup>, GameError> {
    ctx.cfg.validate().map_err(GameError::InvalidConfig)?;
    if ctx.decoding.temperature <= 0.0 {
        return Err(GameError::InvalidConfig(
            "candidate sampling needs temperature > 0".into(),
        ));
    }
    join_all((0..ctx.cfg.k).map(|k| sample_group(ctx, query, round, k)))
        .await
        .into_iter()
        .collect()
}

/// Dispatch, integrate, attack and score one candidate.
pub async fn evaluate_candidate(
    ctx: &GameContext,
    query: &SensitiveQuery,
    group: &SubQueryGroup,
) -> Result<RewardRecord, GameError> {
    let reference = query
        .reference_answer
        .as_deref()
        .ok_or_else(|| GameError::MissingReference(query.id.clone()))?;
    let guard = OutboundGuard::for_query(&query.text);
    let responses = match ctx
        .client
        .dispatch_group(&ctx.endpoints.external, group, &ctx.decoding, &guard)
        .await
    {
        Ok(r) => r,
        Err(e @ (ClientError::PartialFailure { .. } | ClientError::PrivacyViolation { .. })) => {
            return Err(GameError::CandidateDropped {
                query_id: query.id.clone(),
                candidate_index: group.candidate_index,
                reason: e.to_string(),
            })
        }
        Err(e) => return Err(e.into()),
    };
    let request = IntegrationRequest {
        query,
        group,
        responses: &responses,
    };
    let answer = integrate(&request, &ctx.endpoints.integrator, &ctx.decoding, &ctx.client).await?;
    let q_hat = reconstruct(group, &ctx.endpoints.attacker, &ctx.decoding, &ctx.client).await?;
    let quality = quality_score(&answer, Some(reference), &ctx.sim, &ctx.client).await?;
    let leakage = leakage_score(&query.text, &q_hat, &ctx.sim, &ctx.client).await?;
    Ok(RewardRecord::new(
        group.candidate_index,
        quality,
        leakage,
        ctx.cfg.alpha,
        ctx.cfg.beta,
        answer,
        q_hat,
    ))
}

fn rel(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().into_owned()
}

/// Runs round `round` for `batch`, writing into `round_dir`:
/// `sft.jsonl`, `attacker.ready` (by the trainer), `dpo.jsonl`,
/// `rewards.jsonl` and `events.jsonl`. Artifact paths in the result are
/// relative to `base_dir`.
pub async fn run_round(
    ctx: &GameContext,
    batch: &[SensitiveQuery],
    round: usize,
    round_dir: &Path,
    base_dir: &Path,
    events: &EventLog,
) -> Result<RoundArtifacts, GameError> {
    ctx.cfg.validate().map_err(GameError::InvalidConfig)?;
    std::fs::create_dir_all(round_dir)?;
    let workers = Arc::new(Semaphore::new(ctx.cfg.worker_cap));
    let mut skipped: HashMap<String, String> = HashMap::new();

    // Phase A: candidates and the attacker dataset.
    let sampled = join_all(batch.iter().map(|q| {
        let workers = workers.clone();
        async move {
            if q.reference_answer.is_none() {
                return Err(GameError::MissingReference(q.id.clone()));
            }
            let _permit = workers.acquire_owned().await.expect("semaphore open");
            sample_candidates(ctx, q, round).await
        }
    }))
    .await;
    let mut candidates: Vec<(&SensitiveQuery, Vec<SubQueryGroup>)> = Vec::new();
    for (q, result) in batch.iter().zip(sampled) {
        match result {
            Ok(groups) => candidates.push((q, groups)),
            Err(e @ (GameError::TrustViolation(_) | GameError::InvalidConfig(_))) => return Err(e),
            Err(e) => {
                tracing::warn!(query = %q.id, error = %e, "query skipped during sampling");
                skipped.insert(q.id.clone(), e.to_string());
            }
        }
    }
    let by_id: HashMap<String, SensitiveQuery> =
        batch.iter().map(|q| (q.id.clone(), q.clone())).collect();
    let mut sft = Vec::new();
    for (_, groups) in &candidates {
        for (g, s) in groups.iter().zip(emit_sft_samples(groups, &by_id)?) {
            sft.push(SftLine {
                input: s.input,
                target: s.target,
                query_id: g.query_id.clone(),
                candidate_index: g.candidate_index,
                round,
            });
        }
    }
    let sft_path = round_dir.join("sft.jsonl");
    write_jsonl(&sft_path, &sft)?;
    events.record(EventKind::SftFinalized { round, lines: sft.len() });

    // Phase B: the attacker must be retrained and served before any reward.
    if ctx.handshake.auto_ack {
        acknowledge(round_dir, &file_digest(&sft_path)?)?;
    }
    let digest = await_attacker(
        round_dir,
        round,
        &ctx.handshake,
        &ctx.client,
        &ctx.endpoints.attacker,
    )
    .await?;
    events.record(EventKind::AttackerAcknowledged { round, digest });

    // Phase C: rewards with the updated attacker, then preference pairs.
    let jobs = candidates.iter().flat_map(|(q, groups)| {
        groups.iter().map(move |g| (*q, g))
    });
    let outcomes = join_all(jobs.map(|(q, g)| {
        let workers = workers.clone();
        async move {
            let _permit = workers.acquire_owned().await.expect("semaphore open");
            let result = evaluate_candidate(ctx, q, g).await;
            match &result {
                Ok(_) => {
                    events.record(EventKind::RewardComputed {
                        round,
                        query_id: q.id.clone(),
                        candidate_index: g.candidate_index,
                    });
                }
                Err(e) => {
                    events.record(EventKind::CandidateDropped {
                        round,
                        query_id: q.id.clone(),
                        candidate_index: g.candidate_index,
                        reason: e.to_string(),
                    });
                }
            }
            (q.id.clone(), result)
        }
    }))
    .await;

    let mut counts = RoundCounts {
        queries: batch.len(),
        ..RoundCounts::default()
    };
    let mut records: HashMap<String, Vec<RewardRecord>> = HashMap::new();
    for (qid, result) in outcomes {
        match result {
            Ok(r) => records.entry(qid).or_default().push(r),
            Err(GameError::CandidateDropped { .. }) => counts.candidates_dropped += 1,
            Err(e) => {
                counts.candidates_dropped += 1;
                tracing::warn!(query = %qid, error = %e, "candidate evaluation failed");
                skipped.entry(qid).or_insert_with(|| e.to_string());
            }
        }
    }

    let mut dpo = Vec::new();
    let mut rewards = Vec::new();
    for (q, groups) in &candidates {
        let mut recs = records.remove(&q.id).unwrap_or_default();
        recs.sort_by_key(|r| r.candidate_index);
        rewards.extend(recs.iter().map(|r| RewardLine {
            round,
            query_id: q.id.clone(),
            record: r.clone(),
        }));
        if skipped.contains_key(&q.id) {
            continue;
        }
        let prompt = generation_prompt(&q.text, ctx.cfg.n);
        match build_preference_pair(&prompt, &recs, groups, &ctx.cfg) {
            Some(p) => dpo.push(DpoLine {
                prompt: p.prompt,
                chosen: p.chosen,
                rejected: p.rejected,
                chosen_reward: p.chosen_reward,
                rejected_reward: p.rejected_reward,
                query_id: p.query_id,
                round,
            }),
            None => {
                let reason = if recs.len() < ctx.cfg.min_surviving_candidates {
                    format!(
                        "{} surviving candidates, need {}",
                        recs.len(),
                        ctx.cfg.min_surviving_candidates
                    )
                } else {
                    "reward spread within tie_epsilon".to_owned()
                };
                skipped.insert(q.id.clone(), reason);
            }
        }
    }
    counts.pairs_emitted = dpo.len();
    counts.pairs_skipped = counts.queries - counts.pairs_emitted;

    let dpo_path = round_dir.join("dpo.jsonl");
    let reward_path = round_dir.join("rewards.jsonl");
    write_jsonl(&reward_path, &rewards)?;
    write_jsonl(&dpo_path, &dpo)?;
    events.record(EventKind::DpoFinalized { round, lines: dpo.len() });
    write_jsonl(&round_dir.join("events.jsonl"), &events.snapshot())?;

    let skipped_queries = batch
        .iter()
        .filter_map(|q| {
            skipped.get(&q.id).map(|reason| SkippedQuery {
                query_id: q.id.clone(),
                reason: reason.clone(),
            })
        })
        .collect();
    Ok(RoundArtifacts {
        round,
        sft_dataset_path: rel(&sft_path, base_dir),
        dpo_dataset_path: rel(&dpo_path, base_dir),
        reward_log_path: rel(&reward_path, base_dir),
        counts,
        skipped_queries,
    })
}
