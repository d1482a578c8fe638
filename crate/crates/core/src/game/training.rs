use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::events::EventLog;
use super::round::{run_round, GameContext};
use super::{derive_seed, GameError};
use crate::persist::write_json;
use crate::types::{RunManifest, SensitiveQuery};

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Parent directory; the run lives in `<runs_dir>/<run_id>`.
    pub runs_dir: PathBuf,
    pub run_id: String,
    pub resume: bool,
}

impl RunOptions {
    pub fn run_dir(&self) -> PathBuf {
        self.runs_dir.join(&self.run_id)
    }
}

/// Seeded batch for `round`, drawn without replacement.
pub fn sample_batch(
    dataset: &[SensitiveQuery],
    batch_size: usize,
    seed: u64,
    round: usize,
) -> Vec<SensitiveQuery> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&["batch", &seed.to_string(), &round.to_string()]));
    dataset
        .choose_multiple(&mut rng, batch_size.min(dataset.len()))
        .cloned()
        .collect()
}

fn now() -> String {
    let d = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    format!("{}.{:03}", d.as_secs(), d.subsec_millis())
}

fn check_dataset(dataset: &[SensitiveQuery]) -> Result<(), GameError> {
    if dataset.is_empty() {
        return Err(GameError::InvalidConfig("training set is empty".into()));
    }
    let mut seen = HashSet::new();
    for q in dataset {
        if !q.is_valid() {
            return Err(GameError::InvalidConfig(format!("query {} has empty text", q.id)));
        }
        if q.reference_answer.is_none() {
            return Err(GameError::MissingReference(q.id.clone()));
        }
        if !seen.insert(q.id.as_str()) {
            return Err(GameError::InvalidConfig(format!("duplicate query id {}", q.id)));
        }
    }
    Ok(())
}

/// Runs the remaining rounds of a run and returns its manifest.
///
/// The manifest is rewritten after every completed round, so an interrupted
/// run resumes at the first incomplete round; that round's directory is
/// cleared and recomputed while earlier rounds are left untouched.
pub async fn run_training(
    ctx: &GameContext,
    dataset: &[SensitiveQuery],
    opts: &RunOptions,
) -> Result<RunManifest, GameError> {
    ctx.cfg.validate().map_err(GameError::InvalidConfig)?;
    check_dataset(dataset)?;
    let run_dir = opts.run_dir();
    let manifest_path = run_dir.join("manifest.json");

    let mut manifest = if manifest_path.exists() {
        if !opts.resume {
            return Err(GameError::RunExists(opts.run_id.clone()));
        }
        let existing: RunManifest = serde_json::from_slice(&std::fs::read(&manifest_path)?)?;
        if existing.config_snapshot != ctx.snapshot {
            return Err(GameError::ConfigMismatch(opts.run_id.clone()));
        }
        existing
    } else {
        if opts.resume {
            return Err(GameError::InvalidConfig(format!(
                "no run {} to resume under {}",
                opts.run_id,
                opts.runs_dir.display()
            )));
        }
        RunManifest {
            run_id: opts.run_id.clone(),
            round: 0,
            config_snapshot: ctx.snapshot.clone(),
            artifact_paths: BTreeMap::from([
                ("manifest".to_owned(), "manifest.json".to_owned()),
                ("rounds".to_owned(), "rounds".to_owned()),
            ]),
            timestamps: BTreeMap::from([("started".to_owned(), now())]),
            rounds: Vec::new(),
        }
    };
    manifest.rounds.truncate(manifest.round);
    write_json(&manifest_path, &manifest)?;

    for t in manifest.round..ctx.cfg.t {
        let round_dir = run_dir.join("rounds").join(t.to_string());
        if round_dir.exists() {
            std::fs::remove_dir_all(&round_dir)?;
        }
        let batch = sample_batch(dataset, ctx.cfg.batch_size, ctx.seed, t);
        tracing::info!(round = t, queries = batch.len(), "round started");
        let events = EventLog::new();
        let artifacts = run_round(ctx, &batch, t, &round_dir, &run_dir, &events).await?;
        tracing::info!(
            round = t,
            pairs = artifacts.counts.pairs_emitted,
            skipped = artifacts.counts.pairs_skipped,
            "round finished"
        );
        manifest.rounds.push(artifacts);
        manifest.round = t + 1;
        manifest.timestamps.insert(format!("round_{t}_finished"), now());
        write_json(&manifest_path, &manifest)?;
    }
    manifest.timestamps.insert("finished".to_owned(), now());
    write_json(&manifest_path, &manifest)?;
    Ok(manifest)
}
