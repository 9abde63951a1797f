//! Run configuration: a flat `key = value` text file with `#` comments.
//! Every key is documented and validated; unknown keys are errors so typos
//! cannot silently fall back to defaults. Relative paths resolve against the
//! config file's directory, and the raw bytes are fingerprinted so resumed
//! runs can detect configuration drift.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::dataset::AugmentationDescriptor;
use crate::dpo::TrainConfig;
use crate::error::Error;
use crate::gateway::{BackendConfig, BackendKind};
use crate::prompt::DecodingParams;
use crate::Result;

/// Image-corruption settings for negative-rationale prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub noise_step: usize,
    pub total_steps: usize,
    pub flip_prob: f64,
    pub erase_prob: f64,
    pub erase_area: [f64; 2],
    pub use_crop: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_step: 600,
            total_steps: 1000,
            flip_prob: 0.5,
            erase_prob: 0.5,
            erase_area: [0.02, 0.2],
            use_crop: false,
        }
    }
}

impl AugmentConfig {
    /// Descriptor template for one request; the per-request seed is filled in
    /// by the prompt builder.
    pub fn descriptor(&self) -> AugmentationDescriptor {
        AugmentationDescriptor {
            noise_step: self.noise_step,
            flip_prob: self.flip_prob,
            erase_prob: self.erase_prob,
            erase_area: self.erase_area,
            use_crop: self.use_crop,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.descriptor().validate(self.total_steps).map_err(Error::Validation)
    }
}

/// Iteration-loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    /// Number of generate→filter→train iterations.
    pub iterations: u32,
    /// Pool size drawn per iteration.
    pub pool_size: usize,
    /// Corrupted-image rationales requested per pooled sample.
    pub negatives_per_sample: u32,
    /// Stop early when eval accuracy improves by no more than this.
    pub early_stop_epsilon: Option<f64>,
    /// Re-request rationales once for samples whose first output failed a
    /// filter, before pairing.
    pub resample_on_filter_failure: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            iterations: 2,
            pool_size: 6000,
            negatives_per_sample: 1,
            early_stop_epsilon: None,
            resample_on_filter_failure: false,
        }
    }
}

/// Everything a run needs, parsed and validated.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Where this config was loaded from.
    pub source: PathBuf,
    pub manifest: PathBuf,
    pub run_dir: PathBuf,
    pub backend: BackendConfig,
    pub decoding: DecodingParams,
    pub augment: AugmentConfig,
    /// n-gram length for the circularity filter.
    pub filter_n: usize,
    pub train: TrainConfig,
    pub context_slots: usize,
    pub loop_cfg: LoopConfig,
    /// Hex digest of the raw config bytes, for resume-drift detection.
    pub fingerprint: String,
}

impl RunConfig {
    /// Directory image paths in the manifest resolve against.
    pub fn manifest_dir(&self) -> PathBuf {
        self.manifest.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

struct LineCtx<'a> {
    path: &'a str,
    line: usize,
}

impl LineCtx<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { path: self.path.to_string(), line: self.line, msg: msg.into() }
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, value: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        value
            .parse()
            .map_err(|e| self.err(format!("invalid value for {key}: {value:?} ({e})")))
    }

    fn parse_bool(&self, key: &str, value: &str) -> Result<bool> {
        match value {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(self.err(format!("invalid value for {key}: expected true or false"))),
        }
    }
}

/// Parse and validate a config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let raw = std::fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let text = String::from_utf8(raw).map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: "config is not valid UTF-8".into(),
    })?;
    parse_config(&text, path)
}

/// Parse and validate config text already in memory. `source` supplies error
/// locations and the directory relative paths resolve against.
pub fn parse_config(text: &str, path: &Path) -> Result<RunConfig> {
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let resolve = |value: &str| -> PathBuf {
        let p = PathBuf::from(value);
        if p.is_absolute() {
            p
        } else {
            base_dir.join(p)
        }
    };

    let path_str = path.display().to_string();
    let mut manifest: Option<PathBuf> = None;
    let mut run_dir: Option<PathBuf> = None;
    let mut backend = BackendConfig::default();
    let mut decoding = DecodingParams::default();
    let mut augment = AugmentConfig::default();
    let mut filter_n = 3usize;
    let mut train = TrainConfig::default();
    let mut context_slots = 16usize;
    let mut loop_cfg = LoopConfig::default();
    let mut seen: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();

    for (i, raw_line) in text.lines().enumerate() {
        let ctx = LineCtx { path: &path_str, line: i + 1 };
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ctx.err("expected `key = value`"))?;
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(ctx.err(format!("duplicate key: {key}")));
        }
        match key {
            "manifest" => manifest = Some(resolve(value)),
            "run_dir" => run_dir = Some(resolve(value)),
            "backend.kind" => {
                backend.kind = match value {
                    "mock" => BackendKind::Mock,
                    "remote" => BackendKind::Remote,
                    _ => return Err(ctx.err("backend.kind must be mock or remote")),
                }
            }
            "backend.endpoint" => backend.endpoint = value.to_string(),
            "backend.model_id" => backend.model_id = value.to_string(),
            "backend.fixture" => backend.fixture = Some(resolve(value)),
            "backend.mock_default" => {
                backend.mock_default = ctx.parse_bool(key, value)?;
            }
            "backend.max_parallel" => backend.max_parallel = ctx.parse(key, value)?,
            "backend.timeout_ms" => backend.timeout_ms = ctx.parse(key, value)?,
            "backend.retry.max_attempts" => {
                backend.retry.max_attempts = ctx.parse(key, value)?;
            }
            "backend.retry.backoff_ms" => {
                backend.retry.backoff_base_ms = ctx.parse(key, value)?;
            }
            "decode.temperature" => decoding.temperature = ctx.parse(key, value)?,
            "decode.top_p" => decoding.top_p = ctx.parse(key, value)?,
            "augment.noise_step" => augment.noise_step = ctx.parse(key, value)?,
            "augment.total_steps" => augment.total_steps = ctx.parse(key, value)?,
            "augment.flip_prob" => augment.flip_prob = ctx.parse(key, value)?,
            "augment.erase_prob" => augment.erase_prob = ctx.parse(key, value)?,
            "augment.erase_area_min" => augment.erase_area[0] = ctx.parse(key, value)?,
            "augment.erase_area_max" => augment.erase_area[1] = ctx.parse(key, value)?,
            "augment.use_crop" => augment.use_crop = ctx.parse_bool(key, value)?,
            "filter.n" => filter_n = ctx.parse(key, value)?,
            "train.beta" => train.beta = ctx.parse(key, value)?,
            "train.lr" => train.lr = ctx.parse(key, value)?,
            "train.batch_size" => train.batch_size = ctx.parse(key, value)?,
            "train.epochs" => train.epochs = ctx.parse(key, value)?,
            "train.context_slots" => context_slots = ctx.parse(key, value)?,
            "loop.K" => loop_cfg.iterations = ctx.parse(key, value)?,
            "loop.M" => loop_cfg.pool_size = ctx.parse(key, value)?,
            "loop.negatives_per_sample" => {
                loop_cfg.negatives_per_sample = ctx.parse(key, value)?;
            }
            "loop.early_stop_epsilon" => {
                loop_cfg.early_stop_epsilon = Some(ctx.parse(key, value)?);
            }
            "loop.resample_on_filter_failure" => {
                loop_cfg.resample_on_filter_failure = ctx.parse_bool(key, value)?;
            }
            _ => return Err(ctx.err(format!("unknown key: {key}"))),
        }
    }

    let manifest = manifest
        .ok_or_else(|| Error::Validation(format!("{path_str}: missing required key: manifest")))?;
    let run_dir = run_dir.unwrap_or_else(|| base_dir.join("runs"));

    let config = RunConfig {
        source: path.to_path_buf(),
        manifest,
        run_dir,
        backend,
        decoding,
        augment,
        filter_n,
        train,
        context_slots,
        loop_cfg,
        fingerprint: sha256_hex(text.as_bytes()),
    };
    validate_config(&config)?;
    Ok(config)
}

fn validate_config(config: &RunConfig) -> Result<()> {
    config.backend.validate()?;
    config.decoding.validate()?;
    config.augment.validate()?;
    config.train.validate()?;
    if config.filter_n == 0 {
        return Err(Error::Validation("filter.n must be at least 1".into()));
    }
    if config.context_slots == 0 {
        return Err(Error::Validation("train.context_slots must be at least 1".into()));
    }
    if config.loop_cfg.iterations == 0 {
        return Err(Error::Validation("loop.K must be at least 1".into()));
    }
    if config.loop_cfg.pool_size == 0 {
        return Err(Error::Validation("loop.M must be at least 1".into()));
    }
    if config.loop_cfg.negatives_per_sample == 0 {
        return Err(Error::Validation("loop.negatives_per_sample must be at least 1".into()));
    }
    if let Some(eps) = config.loop_cfg.early_stop_epsilon {
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(Error::Validation(
                "loop.early_stop_epsilon must be a finite value ≥ 0".into(),
            ));
        }
    }
    Ok(())
}
