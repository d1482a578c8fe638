//! Reconstruction attack: the adversary sees only the released sub-queries
//! and tries to recover the original question.

use std::collections::HashMap;

use thiserror::Error;

use crate::llm_client::{ChatMessage, ClientError, EndpointSpec, LlmClient, OutboundGuard};
use crate::types::{DecodingParams, ReconstructionSample, SensitiveQuery, SubQueryGroup};

pub const OBSERVED_HEADER: &str = "Observed sub-queries:";
pub const ATTACK_INSTRUCTION: &str =
    "Infer the single original question that produced these sub-queries.";

#[derive(Debug, Error)]
pub enum AttackerError {
    #[error("group references unknown query id {0}")]
    UnresolvedQueryId(String),
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// Canonical attacker input: a header line then `i. <sub-query>` lines.
pub fn serialize_group(group: &SubQueryGroup) -> String {
    let mut out = String::from(OBSERVED_HEADER);
    for (i, sq) in group.subqueries.iter().enumerate() {
        out.push('\n');
        out.push_str(&format!("{}. {}", i + 1, sq.text));
    }
    out
}

/// Attack prompt for an arbitrary observed text.
pub fn attack_prompt(observed: &str) -> String {
    format!("{observed}\n\n{ATTACK_INSTRUCTION}")
}

/// Greedy reconstruction of the query behind `observed` text.
pub async fn reconstruct_text(
    observed: &str,
    attacker: &EndpointSpec,
    max_tokens: u32,
    client: &LlmClient,
) -> Result<String, ClientError> {
    let messages = [ChatMessage::user(attack_prompt(observed))];
    let completion = client
        .chat_guarded(
            attacker,
            &messages,
            &DecodingParams::greedy(max_tokens),
            &OutboundGuard::empty(),
        )
        .await?;
    Ok(completion.text)
}

/// Reconstructed query `q̂` for a group. Always decodes greedily; only the
/// token budget of `decoding` is used.
pub async fn reconstruct(
    group: &SubQueryGroup,
    attacker: &EndpointSpec,
    decoding: &DecodingParams,
    client: &LlmClient,
) -> Result<String, ClientError> {
    reconstruct_text(&serialize_group(group), attacker, decoding.max_tokens, client).await
}

/// One SFT sample per group, mapping the serialized group to its query text.
pub fn emit_sft_samples(
    groups: &[SubQueryGroup],
    queries: &HashMap<String, SensitiveQuery>,
) -> Result<Vec<ReconstructionSample>, AttackerError> {
    groups
        .iter()
        .map(|g| {
            let q = queries
                .get(&g.query_id)
                .ok_or_else(|| AttackerError::UnresolvedQueryId(g.query_id.clone()))?;
            Ok(ReconstructionSample {
                input: serialize_group(g),
                target: q.text.clone(),
            })
        })
        .collect()
}
