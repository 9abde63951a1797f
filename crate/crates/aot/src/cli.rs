//! Command-line surface: each pipeline stage as a standalone subcommand plus
//! the full iteration loop. Exit codes: 0 success, 1 validation/parse
//! failure, 2 transport failure.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{load_config, RunConfig};
use crate::dataset::{read_manifest, read_pairs, read_records, write_pairs, write_records, Polarity};
use crate::dpo::{pairs_to_train, snapshot_reference, train_epoch, write_metrics};
use crate::error::Error;
use crate::eval::{evaluate, write_report, PolicyBackend};
use crate::filters::filter_and_pair;
use crate::gateway::{Backend, BackendKind, MockBackend, RemoteBackend};
use crate::orchestrator::{build_training_requests, run_generation, run_loop};
use crate::policy::{ToyPolicy, Vocabulary};
use crate::seed::derive_seed;
use crate::Result;

/// Answer-oriented rationale pipeline: generate, filter, train, evaluate.
#[derive(Debug, Parser)]
#[command(name = "aot", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a sample pool and generate paired rationales into a records file.
    Generate {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Master seed for pool draws, answer picks, and augmentations.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Iteration number used in seed derivation.
        #[arg(long, default_value_t = 1)]
        iteration: u32,
        /// Output records file (line-delimited JSON).
        #[arg(long)]
        records: PathBuf,
    },
    /// Filter a records file and assemble preference pairs plus statistics.
    Filter {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Iteration number stamped on the emitted pairs.
        #[arg(long, default_value_t = 1)]
        iteration: u32,
        /// Input records file.
        #[arg(long)]
        records: PathBuf,
        /// Output pair file.
        #[arg(long)]
        pairs: PathBuf,
        /// Optional output for filter statistics (also printed).
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Train a toy policy on a pair file and save the checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Input pair file.
        #[arg(long)]
        pairs: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional output for per-step training metrics.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Continue from an existing checkpoint (freezes its vocabulary).
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
    },
    /// Score multiple-choice accuracy with answer-free prompts.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Iteration number used in request seeds.
        #[arg(long, default_value_t = 1)]
        iteration: u32,
        /// Evaluate a trained toy policy instead of the configured backend.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Tokens to decode per answer when evaluating a checkpoint.
        #[arg(long, default_value_t = 24)]
        max_tokens: usize,
        /// Optional output report file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the full generate→filter→train→evaluate loop.
    Iterate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the run directory from the config.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Pretty-print a manifest, records, pair, metrics, or report file.
    Inspect {
        /// File to inspect.
        #[arg(long)]
        file: PathBuf,
        /// Accepted for interface uniformity; inspection does not use it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Accepted for interface uniformity; inspection does not use it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Construct the configured backend.
pub fn build_backend(config: &RunConfig) -> Result<Box<dyn Backend>> {
    match config.backend.kind {
        BackendKind::Mock => match &config.backend.fixture {
            Some(path) => {
                Ok(Box::new(MockBackend::from_fixture(path, config.backend.mock_default)?))
            }
            None => Ok(Box::new(MockBackend::new(config.backend.mock_default))),
        },
        BackendKind::Remote => Ok(Box::new(RemoteBackend::new(
            config.backend.endpoint.clone(),
            config.backend.timeout_ms,
        ))),
    }
}

fn cmd_generate(config: &Path, seed: u64, iteration: u32, records: &Path) -> Result<()> {
    let config = load_config(config)?;
    let samples = read_manifest(&config.manifest)?;
    let pool = crate::dataset::sample_pool(
        &samples,
        config.loop_cfg.pool_size,
        &BTreeSet::new(),
        derive_seed(seed, &["pool", &iteration.to_string()]),
    )?;
    let backend = build_backend(&config)?;
    let requests = build_training_requests(&pool, &config, seed, iteration)?;
    let outcome = run_generation(&requests, &config, backend.as_ref())?;
    write_records(&outcome.records, records)?;
    println!(
        "generated {} records ({} failed) from {} pooled samples -> {}",
        outcome.records.len(),
        outcome.failed,
        pool.len(),
        records.display()
    );
    Ok(())
}

fn cmd_filter(
    config: &Path,
    iteration: u32,
    records: &Path,
    pairs_out: &Path,
    stats_out: Option<&Path>,
) -> Result<()> {
    let config = load_config(config)?;
    let samples = read_manifest(&config.manifest)?;
    let records = read_records(records)?;
    let (positives, negatives): (Vec<_>, Vec<_>) =
        records.into_iter().partition(|r| r.polarity == Polarity::Positive);
    let outcome = filter_and_pair(&positives, &negatives, &samples, config.filter_n, iteration)?;
    write_pairs(&outcome.pairs, pairs_out)?;
    let stats_text = serde_json::to_string(&outcome.stats).expect("stats serialize");
    if let Some(path) = stats_out {
        std::fs::write(path, format!("{stats_text}\n"))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    println!("{stats_text}");
    println!("kept {} pairs -> {}", outcome.pairs.len(), pairs_out.display());
    Ok(())
}

fn cmd_train(
    config: &Path,
    seed: u64,
    pairs_path: &Path,
    checkpoint: &Path,
    metrics_out: Option<&Path>,
    init_checkpoint: Option<&Path>,
) -> Result<()> {
    let config = load_config(config)?;
    let pairs = read_pairs(pairs_path)?;
    let mut policy = match init_checkpoint {
        Some(path) => ToyPolicy::load(path)?,
        None => {
            let texts: Vec<&str> =
                pairs.iter().flat_map(|p| [p.chosen.as_str(), p.rejected.as_str()]).collect();
            ToyPolicy::zeros(Vocabulary::build(texts, config.context_slots)?)
        }
    };
    let reference = snapshot_reference(&policy);
    let train_pairs = pairs_to_train(&pairs, policy.vocab())?;
    let metrics = train_epoch(&mut policy, &reference, &train_pairs, &config.train, seed)?;
    policy.save(checkpoint)?;
    if let Some(path) = metrics_out {
        write_metrics(&metrics, path)?;
    }
    let last = metrics.last().expect("training produced at least one step");
    println!(
        "trained on {} pairs for {} steps: final loss {:.6}, mean margin {:.6} -> {}",
        pairs.len(),
        metrics.len(),
        last.loss,
        last.mean_margin,
        checkpoint.display()
    );
    Ok(())
}

fn cmd_eval(
    config: &Path,
    seed: u64,
    iteration: u32,
    checkpoint: Option<&Path>,
    max_tokens: usize,
    report_out: Option<&Path>,
) -> Result<()> {
    let config = load_config(config)?;
    let samples = read_manifest(&config.manifest)?;
    let backend: Box<dyn Backend> = match checkpoint {
        Some(path) => Box::new(PolicyBackend::new(ToyPolicy::load(path)?, max_tokens)),
        None => build_backend(&config)?,
    };
    let report = evaluate(
        &samples,
        &config.manifest_dir(),
        backend.as_ref(),
        &config.backend.model_id,
        &config.backend.retry,
        config.backend.max_parallel,
        config.decoding,
        seed,
        iteration,
    )?;
    if let Some(path) = report_out {
        write_report(path, &report)?;
    }
    println!("accuracy {:.4} ({}/{})", report.accuracy, report.correct, report.total);
    Ok(())
}

fn cmd_iterate(config: &Path, seed: u64, run_dir: Option<&Path>) -> Result<()> {
    let mut config = load_config(config)?;
    if let Some(dir) = run_dir {
        config.run_dir = dir.to_path_buf();
    }
    let samples = read_manifest(&config.manifest)?;
    let backend = build_backend(&config)?;
    let state = run_loop(&samples, &config, backend.as_ref(), seed, |m| {
        println!(
            "iteration {}: pool {}, kept {} pairs ({} generation failures), \
             final loss {:.6}, eval accuracy {:.4}",
            m.iteration, m.pool_size, m.pairs_kept, m.records_failed, m.final_loss,
            m.eval_accuracy
        );
        if m.pairs_kept < m.pool_size {
            println!(
                "iteration {}: shortfall: {} of {} pooled samples survived filtering",
                m.iteration, m.pairs_kept, m.pool_size
            );
        }
    })?;
    match state.metrics_history.last() {
        Some(last) => println!(
            "run complete after {} iteration(s): eval accuracy {:.4} -> {}",
            state.completed_iterations(),
            last.eval_accuracy,
            config.run_dir.display()
        ),
        None => println!("run already complete -> {}", config.run_dir.display()),
    }
    Ok(())
}

/// Describe one parsed JSON line for human reading.
fn describe_line(value: &serde_json::Value) -> &'static str {
    let has = |k: &str| value.get(k).is_some();
    if has("polarity") && has("rationale_text") {
        "rationale record"
    } else if has("chosen") && has("rejected") {
        "preference pair"
    } else if has("correct") && has("choices") {
        "manifest sample"
    } else if has("loss") && has("lr") {
        "train metric"
    } else if has("verdict") && has("extraction_mode") {
        "eval row"
    } else if has("accuracy") && has("total") {
        "eval summary"
    } else if has("fingerprint") && has("text") {
        "mock fixture entry"
    } else if has("kept") && has("dropped_positive_conclusion") {
        "filter statistics"
    } else if has("format_version") && has("params") {
        "policy checkpoint"
    } else if has("format_version") && has("used_sample_ids") {
        "run state"
    } else {
        "json"
    }
}

fn cmd_inspect(file: &Path) -> Result<()> {
    let raw = std::fs::read_to_string(file)
        .map_err(|e| Error::io(file.display().to_string(), e))?;
    // Whole-file JSON documents (state, checkpoints, single-record files)
    // print as one block; everything else is line-delimited records.
    let trimmed = raw.trim();
    if !trimmed.is_empty() {
        if let Ok(value) = serde_json::from_str::<serde_json::Value>(trimmed) {
            println!("# {}", describe_line(&value));
            println!("{}", serde_json::to_string_pretty(&value).expect("reserialize"));
            return Ok(());
        }
    }
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: file.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        println!("# line {} ({})", i + 1, describe_line(&value));
        println!("{}", serde_json::to_string_pretty(&value).expect("reserialize"));
    }
    Ok(())
}

/// Execute one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, seed, iteration, records } => {
            cmd_generate(&config, seed, iteration, &records)
        }
        Command::Filter { config, seed: _, iteration, records, pairs, stats } => {
            cmd_filter(&config, iteration, &records, &pairs, stats.as_deref())
        }
        Command::Train { config, seed, pairs, checkpoint, metrics, init_checkpoint } => {
            cmd_train(&config, seed, &pairs, &checkpoint, metrics.as_deref(), init_checkpoint.as_deref())
        }
        Command::Eval { config, seed, iteration, checkpoint, max_tokens, report } => {
            cmd_eval(&config, seed, iteration, checkpoint.as_deref(), max_tokens, report.as_deref())
        }
        Command::Iterate { config, seed, run_dir } => {
            cmd_iterate(&config, seed, run_dir.as_deref())
        }
        Command::Inspect { file, config: _, seed: _ } => cmd_inspect(&file),
    }
}
