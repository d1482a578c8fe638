//! Subcommand implementations. Each writes its artifacts and a manifest
//! under `<run_dir>/<run_id>/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use futures::future::try_join_all;
use privq::datasetpipe::{build_dataset, SourceDocument};
use privq::game::{ask, run_training, GameContext, GameError, RunOptions};
use privq::llm_client::{normalize, EndpointRole, LlmClient};
use privq::persist::{read_jsonl, write_json, write_jsonl};
use privq::privacyeval::{build_pool, rank_candidates, EvalReport, Observation};
use privq::textmetrics::{meteor_lite, rouge_l, rouge_n, sim, SimBackend};
use privq::types::{DecodingParams, SensitiveQuery, SubQueryGroup};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::AppConfig;
use crate::Failure;

/// Resolved inputs shared by every command.
pub struct Session {
    pub cfg: AppConfig,
    pub mock: bool,
    pub run_id: Option<String>,
}

impl Session {
    pub fn digest(&self) -> String {
        self.cfg.digest()
    }

    /// Run id from `--run-id`, else derived from the command, config digest
    /// and inputs so that identical invocations land in the same place.
    fn run_id(&self, command: &str, inputs: &[&str]) -> String {
        if let Some(id) = &self.run_id {
            return id.clone();
        }
        let mut h = Sha256::new();
        h.update(self.digest());
        for i in inputs {
            h.update([0x1f]);
            h.update(i.as_bytes());
        }
        format!("{command}-{}", &hex::encode(h.finalize())[..12])
    }

    fn run_dir(&self, run_id: &str) -> PathBuf {
        self.cfg.paths.run_dir.join(run_id)
    }

    fn manifest(&self, command: &str, run_id: &str, artifacts: BTreeMap<String, String>, extra: Value) -> Value {
        json!({
            "command": command,
            "run_id": run_id,
            "config_digest": self.digest(),
            "seed": self.cfg.seed,
            "mock": self.mock,
            "config_snapshot": self.cfg,
            "artifact_paths": artifacts,
            "summary": extra,
        })
    }

    fn client(&self) -> Result<LlmClient, Failure> {
        self.cfg.client(self.mock).map_err(Failure::Validation)
    }

    fn game_context(&self) -> Result<GameContext, Failure> {
        let endpoints = self.cfg.game_endpoints().map_err(Failure::Validation)?;
        let sim = self.cfg.sim_backend().map_err(Failure::Validation)?;
        let snapshot = json!({ "config_digest": self.digest(), "config": self.cfg, "mock": self.mock });
        Ok(GameContext::new(self.client()?, endpoints, sim, self.cfg.game.clone())
            .with_seed(self.cfg.seed)
            .with_decoding(self.cfg.decoding)
            .with_handshake(self.cfg.handshake.clone())
            .with_snapshot(snapshot))
    }
}

fn game_failure(e: GameError) -> Failure {
    match e {
        GameError::InvalidConfig(_)
        | GameError::TrustViolation(_)
        | GameError::MissingReference(_)
        | GameError::RunExists(_)
        | GameError::ConfigMismatch(_) => Failure::Validation(e.into()),
        other => Failure::Runtime(other.into()),
    }
}

fn read_input<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, Failure> {
    if !path.is_file() {
        return Err(Failure::Validation(anyhow::anyhow!("input file {} does not exist", path.display())));
    }
    read_jsonl(path).map_err(|e| Failure::Validation(e.into()))
}

fn rel(path: &Path) -> String {
    path.display().to_string()
}

#[derive(Debug, Serialize)]
pub struct AskReport {
    pub query_id: String,
    pub subqueries: Vec<String>,
    pub responses: Vec<privq::types::ExternalResponse>,
    pub answer: String,
    pub untrusted_payloads: usize,
    pub untrusted_payloads_containing_query: usize,
}

pub async fn cmd_ask(s: &Session, query: &str) -> Result<(String, PathBuf), Failure> {
    let ctx = s.game_context()?;
    let q = SensitiveQuery::new("ask", query);
    if !q.is_valid() {
        return Err(Failure::Validation(anyhow::anyhow!("query text is empty")));
    }
    let result = ask(&ctx, &q).await.map_err(game_failure)?;
    let outbound = ctx.client.outbound_log();
    let needle = normalize(query);
    let report = AskReport {
        query_id: result.query_id,
        subqueries: result.subqueries,
        responses: result.responses,
        answer: result.answer.clone(),
        untrusted_payloads: outbound.len(),
        untrusted_payloads_containing_query: outbound.iter().filter(|r| normalize(&r.payload).contains(&needle)).count(),
    };
    let run_id = s.run_id("ask", &[query]);
    let dir = s.run_dir(&run_id);
    let report_path = dir.join("report.json");
    write_json(&report_path, &report).map_err(|e| Failure::Runtime(e.into()))?;
    let artifacts = BTreeMap::from([("report".to_owned(), rel(&report_path))]);
    let summary = json!({ "untrusted_payloads_containing_query": report.untrusted_payloads_containing_query });
    write_json(&dir.join("manifest.json"), &s.manifest("ask", &run_id, artifacts, summary))
        .map_err(|e| Failure::Runtime(e.into()))?;
    Ok((result.answer, report_path))
}

pub async fn cmd_train(s: &Session, dataset: &Path, resume: Option<&str>) -> Result<PathBuf, Failure> {
    let queries: Vec<SensitiveQuery> = read_input(dataset)?;
    let ctx = s.game_context()?;
    let run_id = match resume {
        Some(id) => id.to_owned(),
        None => s.run_id("train", &[&dataset.display().to_string()]),
    };
    let opts = RunOptions { runs_dir: s.cfg.paths.run_dir.clone(), run_id, resume: resume.is_some() };
    run_training(&ctx, &queries, &opts).await.map_err(game_failure)?;
    Ok(opts.run_dir().join("manifest.json"))
}

/// One attack-evaluation instance: what the attacker saw and the segment it
/// should recover.
#[derive(Debug, Clone, Deserialize)]
pub struct EvalInstance {
    pub id: String,
    pub observed: Observed,
    pub true_segment: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Observed {
    Text(String),
    SubQueries(Vec<String>),
}

impl EvalInstance {
    fn observation(&self) -> Observation {
        match &self.observed {
            Observed::Text(t) => Observation::Text(t.clone()),
            Observed::SubQueries(list) => Observation::Group(SubQueryGroup::from_texts(
                &self.id,
                0,
                0,
                DecodingParams::default(),
                list.iter().cloned(),
            )),
        }
    }
}

pub struct EvalArgs<'a> {
    pub eval_set: &'a Path,
    pub corpus: Option<&'a Path>,
    pub method: &'a str,
    pub pool_size: Option<usize>,
    pub k_list: Option<Vec<usize>>,
}

pub async fn cmd_attack_eval(s: &Session, args: &EvalArgs<'_>) -> Result<(EvalReport, PathBuf), Failure> {
    let instances: Vec<EvalInstance> = read_input(args.eval_set)?;
    if instances.is_empty() {
        return Err(Failure::Validation(anyhow::anyhow!("evaluation set is empty")));
    }
    let mut corpus: Vec<String> = instances.iter().map(|i| i.true_segment.clone()).collect();
    if let Some(path) = args.corpus {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading corpus {}", path.display()))
            .map_err(Failure::Validation)?;
        corpus.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned));
    }
    let n = args.pool_size.unwrap_or(s.cfg.eval.pool_size);
    let k_list = args.k_list.clone().unwrap_or_else(|| s.cfg.eval.k_list.clone());
    if let Some(&k) = k_list.iter().find(|&&k| k == 0 || k > n) {
        return Err(Failure::Validation(anyhow::anyhow!("k={k} outside 1..={n}")));
    }
    let attacker = s.cfg.endpoint_for(EndpointRole::Attacker).map_err(Failure::Validation)?.clone();
    let backend = s.cfg.sim_backend().map_err(Failure::Validation)?;
    let client = s.client()?;
    let mut pools = Vec::with_capacity(instances.len());
    for inst in &instances {
        let seed = privq::game::derive_seed(&["pool", &s.cfg.seed.to_string(), &inst.id]);
        pools.push(build_pool(&inst.id, &inst.true_segment, &corpus, n, seed).map_err(|e| Failure::Validation(e.into()))?);
    }
    let observations: Vec<Observation> = instances.iter().map(EvalInstance::observation).collect();
    let ranked = try_join_all(pools.into_iter().zip(&observations).map(|(pool, obs)| {
        rank_candidates(obs, pool, &attacker, &backend, s.cfg.eval.max_tokens, &client)
    }))
    .await
    .map_err(|e| Failure::Runtime(e.into()))?;
    let report = EvalReport::from_pools(args.method, &ranked, &k_list, s.cfg.seed, &s.digest())
        .map_err(|e| Failure::Runtime(e.into()))?;

    let run_id = s.run_id("attack-eval", &[&args.eval_set.display().to_string(), args.method, &n.to_string()]);
    let dir = s.run_dir(&run_id);
    let report_path = dir.join("report.json");
    let pools_path = dir.join("pools.jsonl");
    let io = |e: std::io::Error| Failure::Runtime(e.into());
    write_json(&report_path, &report).map_err(io)?;
    write_jsonl(&pools_path, &ranked).map_err(io)?;
    let artifacts = BTreeMap::from([("report".to_owned(), rel(&report_path)), ("pools".to_owned(), rel(&pools_path))]);
    write_json(&dir.join("manifest.json"), &s.manifest("attack-eval", &run_id, artifacts, json!(report))).map_err(io)?;
    Ok((report, report_path))
}

pub async fn cmd_dataset_build(s: &Session, docs_path: &Path) -> Result<(Value, PathBuf), Failure> {
    let docs: Vec<SourceDocument> = read_input(docs_path)?;
    let generator = s.cfg.endpoint_for(EndpointRole::QaGenerator).map_err(Failure::Validation)?.clone();
    let judge = s.cfg.endpoint_for(EndpointRole::Judge).map_err(Failure::Validation)?.clone();
    let client = s.client()?;
    let build = build_dataset(&docs, &generator, &judge, &s.cfg.dataset, &s.cfg.decoding, s.cfg.seed, &client)
        .await
        .map_err(|e| match e {
            privq::datasetpipe::DatasetError::Client(_) => Failure::Runtime(e.into()),
            other => Failure::Validation(other.into()),
        })?;
    let run_id = s.run_id("dataset-build", &[&docs_path.display().to_string()]);
    let dir = s.run_dir(&run_id);
    let (train, test, stats) = (dir.join("train.jsonl"), dir.join("test.jsonl"), dir.join("stats.json"));
    let io = |e: std::io::Error| Failure::Runtime(e.into());
    write_jsonl(&train, &build.train).map_err(io)?;
    write_jsonl(&test, &build.test).map_err(io)?;
    write_json(&stats, &build.stats).map_err(io)?;
    let summary = json!({
        "documents": docs.len(),
        "generated": build.generated,
        "kept": build.kept.len(),
        "stats": build.stats,
        "warnings": build.warnings,
    });
    let artifacts = BTreeMap::from([
        ("train".to_owned(), rel(&train)),
        ("test".to_owned(), rel(&test)),
        ("stats".to_owned(), rel(&stats)),
    ]);
    write_json(&dir.join("manifest.json"), &s.manifest("dataset-build", &run_id, artifacts, summary.clone())).map_err(io)?;
    Ok((summary, dir))
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricRow {
    pub line: usize,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub meteor: f64,
    pub sim: f64,
}

fn read_lines(path: &Path) -> Result<Vec<String>, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Validation)?;
    Ok(text.lines().map(str::to_owned).collect())
}

pub async fn metric_rows(
    candidates: &[String],
    references: &[String],
    backend: &SimBackend,
    client: &LlmClient,
) -> Result<Vec<MetricRow>> {
    if candidates.len() != references.len() {
        bail!("{} candidates but {} references", candidates.len(), references.len());
    }
    let sims = try_join_all(candidates.iter().zip(references).map(|(c, r)| sim(c, r, backend, client))).await?;
    candidates
        .iter()
        .zip(references)
        .zip(sims)
        .enumerate()
        .map(|(i, ((c, r), sim))| {
            Ok(MetricRow {
                line: i + 1,
                rouge1: rouge_n(c, r, 1)?.f1,
                rouge2: rouge_n(c, r, 2)?.f1,
                rouge_l: rouge_l(c, r).f1,
                meteor: meteor_lite(c, r),
                sim,
            })
        })
        .collect()
}

pub fn mean_row(rows: &[MetricRow]) -> Value {
    let mean = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len().max(1) as f64;
    json!({
        "count": rows.len(),
        "rouge1": mean(|r| r.rouge1),
        "rouge2": mean(|r| r.rouge2),
        "rougeL": mean(|r| r.rouge_l),
        "meteor": mean(|r| r.meteor),
        "sim": mean(|r| r.sim),
    })
}

pub async fn cmd_metrics(s: &Session, candidates: &Path, references: &Path) -> Result<(Vec<MetricRow>, PathBuf), Failure> {
    let (c, r) = (read_lines(candidates)?, read_lines(references)?);
    if c.len() != r.len() {
        return Err(Failure::Validation(anyhow::anyhow!(
            "{} has {} lines but {} has {}",
            candidates.display(),
            c.len(),
            references.display(),
            r.len()
        )));
    }
    let backend = s.cfg.sim_backend().map_err(Failure::Validation)?;
    let client = s.client()?;
    let rows = metric_rows(&c, &r, &backend, &client).await.map_err(Failure::Runtime)?;
    let run_id = s.run_id("metrics", &[&candidates.display().to_string(), &references.display().to_string()]);
    let dir = s.run_dir(&run_id);
    let rows_path = dir.join("metrics.jsonl");
    let io = |e: std::io::Error| Failure::Runtime(e.into());
    write_jsonl(&rows_path, &rows).map_err(io)?;
    let artifacts = BTreeMap::from([("rows".to_owned(), rel(&rows_path))]);
    write_json(&dir.join("manifest.json"), &s.manifest("metrics", &run_id, artifacts, mean_row(&rows))).map_err(io)?;
    Ok((rows, rows_path))
}
