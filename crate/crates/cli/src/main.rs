mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use commands::{EvalArgs, Session};
use config::AppConfig;

#[derive(Debug, Parser)]
#[command(name = "privq", version, about = "Privacy-preserving query decomposition over untrusted LLMs")]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use in-process mock backends for every endpoint.
    #[arg(long, global = true)]
    mock: bool,
    /// Run directory name under paths.run_dir (default: derived from inputs).
    #[arg(long, global = true)]
    run_id: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Answer one query through the decomposition path.
    Ask { query: String },
    /// Run the game loop over a JSONL set of queries with reference answers.
    Train {
        dataset: PathBuf,
        /// Continue an interrupted run.
        #[arg(long)]
        resume: Option<String>,
    },
    /// Rank candidate pools with the attacker and report ASR@k and MRR.
    AttackEval {
        eval_set: PathBuf,
        /// Extra decoy segments, one per line.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "decomposition")]
        method: String,
        /// Pool size N.
        #[arg(long)]
        pool_size: Option<usize>,
        /// Comma-separated k values.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
    },
    /// Generate, judge, filter and split QA pairs from documents.
    DatasetBuild { docs: PathBuf },
    /// Score candidate lines against reference lines.
    Metrics { candidates: PathBuf, references: PathBuf },
}

/// Error classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

fn resolve(cli: &Cli, needs_endpoints: bool) -> Result<Session, Failure> {
    let mut cfg = match (&cli.config, cli.mock, needs_endpoints) {
        (Some(path), _, _) => AppConfig::load(path).map_err(Failure::Validation)?,
        (None, true, _) => AppConfig::builtin_mock(),
        (None, false, false) => AppConfig { sim: Default::default(), ..AppConfig::builtin_mock() },
        (None, false, true) => {
            return Err(Failure::Validation(anyhow::anyhow!("--config <path> is required unless --mock is given")))
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.mock {
        cfg.force_mock();
    }
    cfg.validate().context("invalid configuration").map_err(Failure::Validation)?;
    Ok(Session { cfg, mock: cli.mock, run_id: cli.run_id.clone() })
}

async fn run(cli: Cli) -> Result<(), Failure> {
    let needs_endpoints = !matches!(cli.command, Command::Metrics { .. });
    let session = resolve(&cli, needs_endpoints)?;
    match &cli.command {
        Command::Ask { query } => {
            let (answer, report) = commands::cmd_ask(&session, query).await?;
            println!("{answer}");
            eprintln!("report: {}", report.display());
        }
        Command::Train { dataset, resume } => {
            let manifest = commands::cmd_train(&session, dataset, resume.as_deref()).await?;
            println!("{}", manifest.display());
        }
        Command::AttackEval { eval_set, corpus, method, pool_size, k } => {
            let args = EvalArgs {
                eval_set,
                corpus: corpus.as_deref(),
                method,
                pool_size: *pool_size,
                k_list: k.clone(),
            };
            let (report, path) = commands::cmd_attack_eval(&session, &args).await?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            eprintln!("report: {}", path.display());
        }
        Command::DatasetBuild { docs } => {
            let (summary, dir) = commands::cmd_dataset_build(&session, docs).await?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            eprintln!("output: {}", dir.display());
        }
        Command::Metrics { candidates, references } => {
            let (rows, path) = commands::cmd_metrics(&session, candidates, references).await?;
            println!("{:>6} {:>8} {:>8} {:>8} {:>8} {:>8}", "line", "rouge1", "rouge2", "rougeL", "meteor", "sim");
            for r in &rows {
                println!(
                    "{:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                    r.line, r.rouge1, r.rouge2, r.rouge_l, r.meteor, r.sim
                );
            }
            let m = commands::mean_row(&rows);
            let f = |k: &str| m[k].as_f64().unwrap_or(0.0);
            println!(
                "{:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                "mean",
                f("rouge1"),
                f("rouge2"),
                f("rougeL"),
                f("meteor"),
                f("sim")
            );
            eprintln!("rows: {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: starting runtime: {e}");
            return ExitCode::from(3);
        }
    };
    match runtime.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let (Failure::Validation(e) | Failure::Runtime(e)) = &failure;
            eprintln!("error: {e:#}");
            ExitCode::from(failure.code())
        }
    }
}
