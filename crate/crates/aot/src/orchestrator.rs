//! Iteration driver: pool sampling → rationale generation → filtering →
//! preference training → evaluation, with durable per-run state. Each
//! iteration writes its artifacts under `run_dir/iter_NNN/`; the run state is
//! persisted with an atomic write-then-rename so a crash mid-iteration leaves
//! the previous state intact.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::NoiseSchedule;
use crate::config::RunConfig;
use crate::dataset::{
    sample_pool, write_pairs, write_records, McSample, Polarity, Provenance, RationaleRecord,
    Verdicts,
};
use crate::dpo::{pairs_to_train, snapshot_reference, train_epoch, write_metrics};
use crate::error::Error;
use crate::eval::{evaluate, write_report};
use crate::filters::{filter_and_pair, parse_steps, FilterOutcome, FilterStats};
use crate::gateway::{self, Backend, GenerationResult};
use crate::policy::{ToyPolicy, Vocabulary};
use crate::prompt::{make_requests, GenerationRequest};
use crate::seed::{derive_seed, request_seed};
use crate::Result;

const STATE_VERSION: u32 = 1;
pub const STATE_FILE: &str = "state.json";
pub const CONFIG_COPY: &str = "config.cfg";
const LOCK_FILE: &str = ".lock";

/// Summary of one completed iteration, kept in the run state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationMetrics {
    pub iteration: u32,
    pub pool_size: usize,
    /// Requests whose generation failed non-fatally (empty completions).
    pub records_failed: usize,
    pub pairs_kept: usize,
    pub filter: FilterStats,
    pub final_loss: f64,
    pub mean_margin: f64,
    pub eval_accuracy: f64,
}

/// Durable run state. `iteration` is the next iteration to run (starting at
/// 1); `used_sample_ids` only ever grows; `policy_checkpoint` is relative to
/// the run directory so run directories stay relocatable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationState {
    pub format_version: u32,
    pub iteration: u32,
    pub used_sample_ids: BTreeSet<String>,
    pub policy_checkpoint: Option<String>,
    pub metrics_history: Vec<IterationMetrics>,
    pub config_fingerprint: String,
}

impl IterationState {
    pub fn new(config_fingerprint: String) -> Self {
        IterationState {
            format_version: STATE_VERSION,
            iteration: 1,
            used_sample_ids: BTreeSet::new(),
            policy_checkpoint: None,
            metrics_history: Vec::new(),
            config_fingerprint,
        }
    }

    pub fn completed_iterations(&self) -> u32 {
        self.metrics_history.len() as u32
    }
}

/// Advisory per-run-directory lock; removed on drop. A leftover lock from a
/// crashed process must be deleted manually (the error says where it is).
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(LOCK_FILE);
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                let _ = writeln!(file, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Validation(format!(
                    "run directory is locked by another process; if that process is gone, \
                     remove {}",
                    path.display()
                )))
            }
            Err(e) => Err(Error::io(path.display().to_string(), e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Directory holding one iteration's artifacts.
pub fn iteration_dir(run_dir: &Path, iteration: u32) -> PathBuf {
    run_dir.join(format!("iter_{iteration:03}"))
}

/// Write the state file atomically: serialize to a sibling temp file, then
/// rename over the final name.
pub fn persist_state(run_dir: &Path, state: &IterationState) -> Result<()> {
    let final_path = run_dir.join(STATE_FILE);
    let tmp_path = run_dir.join(format!("{STATE_FILE}.tmp"));
    let mut text = serde_json::to_string_pretty(state).expect("state serializes");
    text.push('\n');
    std::fs::write(&tmp_path, text).map_err(|e| Error::io(tmp_path.display().to_string(), e))?;
    std::fs::rename(&tmp_path, &final_path)
        .map_err(|e| Error::io(final_path.display().to_string(), e))
}

/// Load persisted state, or `None` when the run is fresh.
pub fn load_state(run_dir: &Path) -> Result<Option<IterationState>> {
    let path = run_dir.join(STATE_FILE);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(path.display().to_string(), e)),
    };
    let state: IterationState = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 1,
        msg: e.to_string(),
    })?;
    if state.format_version != STATE_VERSION {
        return Err(Error::Validation(format!(
            "state file {} has format_version {}, expected {STATE_VERSION}",
            path.display(),
            state.format_version
        )));
    }
    Ok(Some(state))
}

/// Turn one finished generation into a rationale record with pending verdicts.
fn record_from(
    request: &GenerationRequest,
    generation: &GenerationResult,
    backend_id: &str,
) -> Result<RationaleRecord> {
    let parse = parse_steps(&generation.text)?;
    Ok(RationaleRecord {
        sample_id: request.sample_id.clone(),
        polarity: request.polarity.expect("training request has a polarity"),
        target: request.target.clone().expect("training request has a target"),
        rationale_text: generation.text.clone(),
        steps: parse.steps.into_iter().map(|(_, body)| body).collect(),
        provenance: Provenance {
            prompt_kind: request.prompt_kind,
            backend_id: backend_id.to_string(),
            temperature: request.decoding.temperature,
            top_p: request.decoding.top_p,
            rng_seed: request.rng_seed,
            augmentation: request.augmentation.clone(),
        },
        verdicts: Verdicts::default(),
    })
}

/// Build the positive and negative request blocks for a pooled sample set.
/// Positives come first (pool order), then negatives (pool order, one per
/// configured negative index). Seeds depend on the sample id, not the pool
/// position, so a sample's requests are stable across pool compositions.
pub fn build_training_requests(
    pool: &[McSample],
    config: &RunConfig,
    master_seed: u64,
    iteration: u32,
) -> Result<Vec<GenerationRequest>> {
    let schedule = NoiseSchedule::standard(config.augment.total_steps)?;
    let descriptor = config.augment.descriptor();
    let manifest_dir = config.manifest_dir();
    let mut requests = Vec::with_capacity(pool.len() * (1 + config.loop_cfg.negatives_per_sample as usize));
    for sample in pool {
        requests.push(make_requests(
            sample,
            Polarity::Positive,
            None,
            config.decoding,
            request_seed(master_seed, iteration, &sample.id, Polarity::Positive.as_str(), 0),
            &schedule,
            &manifest_dir,
        )?);
    }
    for sample in pool {
        for index in 0..config.loop_cfg.negatives_per_sample {
            requests.push(make_requests(
                sample,
                Polarity::Negative,
                Some(&descriptor),
                config.decoding,
                request_seed(
                    master_seed,
                    iteration,
                    &sample.id,
                    Polarity::Negative.as_str(),
                    index,
                ),
                &schedule,
                &manifest_dir,
            )?);
        }
    }
    Ok(requests)
}

/// Outcome of running a request block: records for completed generations and
/// the count of non-fatal failures. Transport failures abort.
pub struct GenerationOutcome {
    pub records: Vec<RationaleRecord>,
    pub failed: usize,
}

/// Generate all requests through the gateway and convert to records,
/// dropping (and counting) requests whose completion was empty.
pub fn run_generation(
    requests: &[GenerationRequest],
    config: &RunConfig,
    backend: &dyn Backend,
) -> Result<GenerationOutcome> {
    let results = gateway::generate_batch(
        requests,
        backend,
        &config.backend.model_id,
        &config.backend.retry,
        config.backend.max_parallel,
    );
    let mut records = Vec::with_capacity(requests.len());
    let mut failed = 0;
    for (request, result) in requests.iter().zip(results) {
        match result {
            Ok(generation) => records.push(record_from(request, &generation, backend.id())?),
            Err(e) if e.is_transport() => return Err(e),
            Err(_) => failed += 1,
        }
    }
    Ok(GenerationOutcome { records, failed })
}

fn split_by_polarity(
    records: Vec<RationaleRecord>,
) -> (Vec<RationaleRecord>, Vec<RationaleRecord>) {
    let (positives, negatives): (Vec<_>, Vec<_>) =
        records.into_iter().partition(|r| r.polarity == Polarity::Positive);
    (positives, negatives)
}

/// One resample round for filter-failed sides: every sample whose positive
/// (or negative) record exists but failed its filters gets one fresh request
/// with a derived seed. Records that fail again (or come back empty) keep
/// their original failing text. With a deterministic backend, an unchanged
/// positive request reproduces the same completion, so this only helps
/// backends with sampling noise (or negatives, whose augmentation reseeds).
fn resample_failed(
    outcome: &FilterOutcome,
    pool: &[McSample],
    config: &RunConfig,
    backend: &dyn Backend,
) -> Result<(Vec<RationaleRecord>, Vec<RationaleRecord>, usize)> {
    let schedule = NoiseSchedule::standard(config.augment.total_steps)?;
    let descriptor = config.augment.descriptor();
    let manifest_dir = config.manifest_dir();
    let by_id: std::collections::BTreeMap<&str, &McSample> =
        pool.iter().map(|s| (s.id.as_str(), s)).collect();

    let failed = |r: &RationaleRecord| {
        r.verdicts.conclusion == crate::dataset::Verdict::Fail
            || r.verdicts.circularity == crate::dataset::Verdict::Fail
    };

    let mut requests = Vec::new();
    let mut slots: Vec<(Polarity, usize)> = Vec::new();
    for (i, record) in outcome.positives.iter().enumerate() {
        if failed(record) {
            let sample = by_id[record.sample_id.as_str()];
            requests.push(make_requests(
                sample,
                Polarity::Positive,
                None,
                config.decoding,
                derive_seed(record.provenance.rng_seed, &["resample"]),
                &schedule,
                &manifest_dir,
            )?);
            slots.push((Polarity::Positive, i));
        }
    }
    for (i, record) in outcome.negatives.iter().enumerate() {
        if failed(record) {
            let sample = by_id[record.sample_id.as_str()];
            requests.push(make_requests(
                sample,
                Polarity::Negative,
                Some(&descriptor),
                config.decoding,
                derive_seed(record.provenance.rng_seed, &["resample"]),
                &schedule,
                &manifest_dir,
            )?);
            slots.push((Polarity::Negative, i));
        }
    }

    let mut positives = outcome.positives.clone();
    let mut negatives = outcome.negatives.clone();
    if requests.is_empty() {
        return Ok((positives, negatives, 0));
    }
    // Results stay aligned with `slots`, so failures keep the original
    // record in place.
    let mut replaced = 0;
    let results = gateway::generate_batch(
        &requests,
        backend,
        &config.backend.model_id,
        &config.backend.retry,
        config.backend.max_parallel,
    );
    for ((polarity, slot), (request, result)) in slots.into_iter().zip(requests.iter().zip(results))
    {
        match result {
            Ok(generation) => {
                let record = record_from(request, &generation, backend.id())?;
                match polarity {
                    Polarity::Positive => positives[slot] = record,
                    Polarity::Negative => negatives[slot] = record,
                }
                replaced += 1;
            }
            Err(e) if e.is_transport() => return Err(e),
            Err(_) => {}
        }
    }
    // Verdicts of replaced records are pending again; the caller re-filters.
    Ok((positives, negatives, replaced))
}

/// Run the next iteration: draw a pool of unused samples, generate paired
/// rationales, filter, train from the running checkpoint (or a fresh zero
/// policy on the first iteration, whose vocabulary is then frozen), evaluate,
/// and persist updated state. On error the in-memory and persisted states are
/// left untouched.
pub fn run_iteration(
    state: &mut IterationState,
    samples: &[McSample],
    config: &RunConfig,
    backend: &dyn Backend,
    master_seed: u64,
) -> Result<IterationMetrics> {
    let k = state.iteration;
    let run_dir = &config.run_dir;
    let pool = sample_pool(
        samples,
        config.loop_cfg.pool_size,
        &state.used_sample_ids,
        derive_seed(master_seed, &["pool", &k.to_string()]),
    )?;

    let requests = build_training_requests(&pool, config, master_seed, k)?;
    let generated = run_generation(&requests, config, backend)?;
    let records_failed = generated.failed;
    let (positives, negatives) = split_by_polarity(generated.records);

    let mut outcome = filter_and_pair(&positives, &negatives, &pool, config.filter_n, k)?;
    if config.loop_cfg.resample_on_filter_failure {
        let (positives, negatives, replaced) =
            resample_failed(&outcome, &pool, config, backend)?;
        if replaced > 0 {
            outcome = filter_and_pair(&positives, &negatives, &pool, config.filter_n, k)?;
        }
    }

    let dir = iteration_dir(run_dir, k);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut all_records = outcome.positives.clone();
    all_records.extend(outcome.negatives.iter().cloned());
    write_records(&all_records, &dir.join("records.jsonl"))?;
    write_pairs(&outcome.pairs, &dir.join("pairs.jsonl"))?;
    let stats_path = dir.join("filter_stats.json");
    let mut stats_text = serde_json::to_string(&outcome.stats).expect("stats serialize");
    stats_text.push('\n');
    std::fs::write(&stats_path, stats_text)
        .map_err(|e| Error::io(stats_path.display().to_string(), e))?;

    if outcome.pairs.is_empty() {
        return Err(Error::Validation(format!(
            "iteration {k}: no pairs survived filtering (of {} pooled samples); \
             state not advanced",
            pool.len()
        )));
    }

    // First iteration builds the vocabulary from its own pair texts and
    // freezes it via the checkpoint; later iterations reuse it.
    let mut policy = match &state.policy_checkpoint {
        Some(rel) => ToyPolicy::load(&run_dir.join(rel))?,
        None => {
            let texts: Vec<&str> = outcome
                .pairs
                .iter()
                .flat_map(|p| [p.chosen.as_str(), p.rejected.as_str()])
                .collect();
            ToyPolicy::zeros(Vocabulary::build(texts, config.context_slots)?)
        }
    };
    let reference = snapshot_reference(&policy);
    let train_pairs = pairs_to_train(&outcome.pairs, policy.vocab())?;
    let metrics = train_epoch(
        &mut policy,
        &reference,
        &train_pairs,
        &config.train,
        derive_seed(master_seed, &["train", &k.to_string()]),
    )?;
    write_metrics(&metrics, &dir.join("train_metrics.jsonl"))?;
    let checkpoint_rel = format!("iter_{k:03}/checkpoint.json");
    policy.save(&dir.join("checkpoint.json"))?;

    let report = evaluate(
        samples,
        &config.manifest_dir(),
        backend,
        &config.backend.model_id,
        &config.backend.retry,
        config.backend.max_parallel,
        config.decoding,
        master_seed,
        k,
    )?;
    write_report(&dir.join("eval_report.jsonl"), &report)?;

    let last = metrics.last().expect("nonempty pair set yields at least one step");
    let summary = IterationMetrics {
        iteration: k,
        pool_size: pool.len(),
        records_failed,
        pairs_kept: outcome.pairs.len(),
        filter: outcome.stats.clone(),
        final_loss: last.loss,
        mean_margin: last.mean_margin,
        eval_accuracy: report.accuracy,
    };

    // Commit: mutate a copy, persist it, then swap in.
    let mut next = state.clone();
    next.used_sample_ids.extend(pool.iter().map(|s| s.id.clone()));
    next.policy_checkpoint = Some(checkpoint_rel);
    next.metrics_history.push(summary.clone());
    next.iteration = k + 1;
    persist_state(run_dir, &next)?;
    *state = next;
    Ok(summary)
}

/// Whether the accuracy history says to stop before running iteration
/// `state.iteration`: the last improvement was no better than epsilon.
pub fn should_stop_early(state: &IterationState, epsilon: Option<f64>) -> bool {
    let Some(eps) = epsilon else { return false };
    let n = state.metrics_history.len();
    if n < 2 {
        return false;
    }
    let last = state.metrics_history[n - 1].eval_accuracy;
    let prev = state.metrics_history[n - 2].eval_accuracy;
    last - prev <= eps
}

/// Open (or resume) the run directory: create it, take the lock, copy the
/// config in, and load or initialize state. The caller holds the lock for
/// the duration of the run.
pub fn open_run(config: &RunConfig) -> Result<(RunLock, IterationState)> {
    std::fs::create_dir_all(&config.run_dir)
        .map_err(|e| Error::io(config.run_dir.display().to_string(), e))?;
    let lock = RunLock::acquire(&config.run_dir)?;
    let copy_path = config.run_dir.join(CONFIG_COPY);
    if !copy_path.exists() {
        std::fs::copy(&config.source, &copy_path)
            .map_err(|e| Error::io(copy_path.display().to_string(), e))?;
    }
    let state = match load_state(&config.run_dir)? {
        Some(state) => {
            if state.config_fingerprint != config.fingerprint {
                return Err(Error::Validation(format!(
                    "config fingerprint {} does not match the one this run started with ({}); \
                     use a fresh run directory for a changed config",
                    config.fingerprint, state.config_fingerprint
                )));
            }
            state
        }
        None => IterationState::new(config.fingerprint.clone()),
    };
    Ok((lock, state))
}

/// Run iterations until `loop.K` is reached or accuracy plateaus (when an
/// early-stop epsilon is configured). Resuming a partially complete run
/// continues from the persisted iteration.
pub fn run_loop(
    samples: &[McSample],
    config: &RunConfig,
    backend: &dyn Backend,
    master_seed: u64,
    mut on_iteration: impl FnMut(&IterationMetrics),
) -> Result<IterationState> {
    let (lock, mut state) = open_run(config)?;
    while state.iteration <= config.loop_cfg.iterations {
        if should_stop_early(&state, config.loop_cfg.early_stop_epsilon) {
            break;
        }
        let summary = run_iteration(&mut state, samples, config, backend, master_seed)?;
        on_iteration(&summary);
    }
    drop(lock);
    Ok(state)
}
