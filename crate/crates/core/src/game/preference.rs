use std::cmp::Ordering;

use super::GameConfig;
use crate::types::{PreferencePair, RewardRecord, SubQueryGroup};

/// Best-first order: higher reward, then lower leakage, then lower index.
fn best_first(a: &RewardRecord, b: &RewardRecord) -> Ordering {
    b.reward
        .total_cmp(&a.reward)
        .then(a.leakage.total_cmp(&b.leakage))
        .then(a.candidate_index.cmp(&b.candidate_index))
}

/// One best-versus-worst pair for a query, or `None` when fewer than
/// `min_surviving_candidates` records remain or the reward spread does not
/// exceed `tie_epsilon`.
///
/// The rejected side mirrors the chosen tie-break: among the lowest rewards
/// it takes the highest leakage, then the highest candidate index.
pub fn build_preference_pair(
    prompt: &str,
    records: &[RewardRecord],
    groups: &[SubQueryGroup],
    cfg: &GameConfig,
) -> Option<PreferencePair> {
    if records.len() < cfg.min_surviving_candidates.max(2) {
        return None;
    }
    let chosen = records.iter().min_by(|a, b| best_first(a, b))?;
    let rejected = records.iter().max_by(|a, b| best_first(a, b))?;
    if chosen.reward - rejected.reward <= cfg.tie_epsilon {
        return None;
    }
    let group_of = |idx: usize| groups.iter().find(|g| g.candidate_index == idx);
    let (cg, rg) = (group_of(chosen.candidate_index)?, group_of(rejected.candidate_index)?);
    Some(PreferencePair {
        query_id: cg.query_id.clone(),
        prompt: prompt.to_owned(),
        chosen: cg.to_numbered_list(),
        rejected: rg.to_numbered_list(),
        chosen_reward: chosen.reward,
        rejected_reward: rejected.reward,
        chosen_index: chosen.candidate_index,
        rejected_index: rejected.candidate_index,
    })
}
