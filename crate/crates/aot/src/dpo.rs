//! Desk-scale direct preference optimization on the toy bigram policy:
//! sequence log-probabilities, the preference loss in its numerically stable
//! softplus form, exact analytic gradients, and a one-epoch trainer with a
//! cosine-decayed learning rate and a frozen reference copy.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::PreferencePair;
use crate::error::Error;
use crate::policy::{ToyPolicy, Vocabulary};
use crate::seed::derive_seed;
use crate::Result;

/// One training item: a context token plus the encoded chosen and rejected
/// token sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainPair {
    pub sample_id: String,
    pub context: usize,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
}

/// Optimizer hyperparameters. `Default` carries the reference values used at
/// full scale; `desk()` swaps in the settings sized for the toy policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { beta: 0.1, lr: 2e-6, batch_size: 128, epochs: 1 }
    }
}

impl TrainConfig {
    /// Settings sized for the toy policy: a learning rate tuned for
    /// billion-parameter models is far too small for a V x V logit table.
    pub fn desk() -> Self {
        TrainConfig { beta: 0.1, lr: 1e-2, batch_size: 8, epochs: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(Error::Validation(format!(
                "beta {} must be a positive finite number",
                self.beta
            )));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Validation(format!(
                "lr {} must be a positive finite number",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-step training metrics, emitted as line-delimited records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetric {
    pub step: usize,
    pub loss: f64,
    pub mean_margin: f64,
    pub lr: f64,
}

/// Numerically stable ln(1 + exp(x)).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Encode preference pairs for training against `vocab`: texts are tokenized
/// and the context token is derived from (image_path, question).
pub fn pairs_to_train(pairs: &[PreferencePair], vocab: &Vocabulary) -> Result<Vec<TrainPair>> {
    pairs
        .iter()
        .map(|p| {
            let chosen = vocab.encode_text(&p.chosen);
            let rejected = vocab.encode_text(&p.rejected);
            if chosen.is_empty() || rejected.is_empty() {
                return Err(Error::Validation(format!(
                    "pair {}: rationale has no encodable tokens",
                    p.sample_id
                )));
            }
            Ok(TrainPair {
                sample_id: p.sample_id.clone(),
                context: vocab.context_token(&p.image_path, &p.question),
                chosen,
                rejected,
            })
        })
        .collect()
}

/// Sum of per-token log-softmax values along `tokens`, starting from
/// `context`. Strictly negative for V >= 2.
pub fn sequence_logprob(policy: &ToyPolicy, context: usize, tokens: &[usize]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::Validation("sequence_logprob on an empty token list".into()));
    }
    let mut prev = context;
    let mut total = 0.0;
    for &tok in tokens {
        total += policy.token_logprob(prev, tok)?;
        prev = tok;
    }
    Ok(total)
}

/// Value-equal frozen copy of the policy; training the original never
/// changes it.
pub fn snapshot_reference(policy: &ToyPolicy) -> ToyPolicy {
    policy.clone()
}

fn check_shared_vocab(policy: &ToyPolicy, reference: &ToyPolicy) -> Result<()> {
    if policy.vocab() != reference.vocab() {
        return Err(Error::Validation("policy and reference must share a vocabulary".into()));
    }
    Ok(())
}

/// Unscaled preference margin of one pair:
/// (log pi_theta - log pi_ref)(chosen) - (log pi_theta - log pi_ref)(rejected).
fn raw_margin(policy: &ToyPolicy, reference: &ToyPolicy, pair: &TrainPair) -> Result<f64> {
    let lp_c = sequence_logprob(policy, pair.context, &pair.chosen)?;
    let lp_r = sequence_logprob(policy, pair.context, &pair.rejected)?;
    let ref_c = sequence_logprob(reference, pair.context, &pair.chosen)?;
    let ref_r = sequence_logprob(reference, pair.context, &pair.rejected)?;
    Ok((lp_c - ref_c) - (lp_r - ref_r))
}

/// Beta-scaled margins of every pair (the sigmoid's argument in the loss).
pub fn pair_margins(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    batch: &[TrainPair],
    beta: f64,
) -> Result<Vec<f64>> {
    check_shared_vocab(policy, reference)?;
    batch.iter().map(|p| Ok(beta * raw_margin(policy, reference, p)?)).collect()
}

/// Mean preference loss over the batch: softplus(-beta * margin) per pair,
/// the stable form of -log sigmoid(beta * margin).
pub fn dpo_loss(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    batch: &[TrainPair],
    beta: f64,
) -> Result<f64> {
    check_shared_vocab(policy, reference)?;
    if batch.is_empty() {
        return Err(Error::Validation("preference loss over an empty batch".into()));
    }
    let mut total = 0.0;
    for pair in batch {
        total += softplus(-beta * raw_margin(policy, reference, pair)?);
    }
    Ok(total / batch.len() as f64)
}

/// Accumulate `coeff * d(sequence logprob)/d(params)` for one sequence.
/// The per-token Jacobian of log softmax(row)[tok] w.r.t. row element j is
/// delta(j == tok) - softmax(row)[j].
fn accumulate_sequence_grad(
    policy: &ToyPolicy,
    context: usize,
    tokens: &[usize],
    coeff: f64,
    grad: &mut [f64],
) {
    let v = policy.v();
    let mut prev = context;
    for &tok in tokens {
        let p = policy.row_softmax(prev);
        let base = prev * v;
        for j in 0..v {
            grad[base + j] -= coeff * p[j];
        }
        grad[base + tok] += coeff;
        prev = tok;
    }
}

/// Exact analytic gradient of `dpo_loss` with respect to the policy params,
/// as a row-major V x V buffer. Per pair, d(loss)/d(margin) is
/// -beta * sigmoid(-beta * margin), propagated through both sequence
/// log-probabilities.
pub fn dpo_grad(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    batch: &[TrainPair],
    beta: f64,
) -> Result<Vec<f64>> {
    check_shared_vocab(policy, reference)?;
    if batch.is_empty() {
        return Err(Error::Validation("preference gradient over an empty batch".into()));
    }
    let v = policy.v();
    let mut grad = vec![0.0; v * v];
    let scale = 1.0 / batch.len() as f64;
    for pair in batch {
        let margin = raw_margin(policy, reference, pair)?;
        let coeff = -beta * sigmoid(-beta * margin) * scale;
        accumulate_sequence_grad(policy, pair.context, &pair.chosen, coeff, &mut grad);
        accumulate_sequence_grad(policy, pair.context, &pair.rejected, -coeff, &mut grad);
    }
    Ok(grad)
}

/// Cosine decay from `lr` toward zero over `total` steps.
fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Train for `config.epochs` epochs of seeded mini-batch gradient descent
/// with a cosine-decayed learning rate. The reference stays untouched;
/// metrics are recorded per step at the pre-update parameters.
pub fn train_epoch(
    policy: &mut ToyPolicy,
    reference: &ToyPolicy,
    pairs: &[TrainPair],
    config: &TrainConfig,
    rng_seed: u64,
) -> Result<Vec<StepMetric>> {
    config.validate()?;
    check_shared_vocab(policy, reference)?;
    if pairs.is_empty() {
        return Err(Error::Validation("cannot train on zero preference pairs".into()));
    }
    let batches_per_epoch = pairs.len().div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let mut metrics = Vec::with_capacity(total_steps);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut rng =
            ChaCha12Rng::seed_from_u64(derive_seed(rng_seed, &["shuffle", &epoch.to_string()]));
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TrainPair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let loss = dpo_loss(policy, reference, &batch, config.beta)?;
            let margins = pair_margins(policy, reference, &batch, config.beta)?;
            let mean_margin = margins.iter().sum::<f64>() / margins.len() as f64;
            let grad = dpo_grad(policy, reference, &batch, config.beta)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                let ids: Vec<&str> = batch.iter().map(|p| p.sample_id.as_str()).collect();
                return Err(Error::Numeric {
                    step,
                    detail: format!("loss {loss}, pairs [{}]", ids.join(", ")),
                });
            }
            let lr = cosine_lr(config.lr, step, total_steps);
            for (p, g) in policy.params_mut().iter_mut().zip(&grad) {
                *p -= lr * g;
            }
            metrics.push(StepMetric { step, loss, mean_margin, lr });
            step += 1;
        }
    }
    Ok(metrics)
}

/// Write step metrics one JSON record per line.
pub fn write_metrics(metrics: &[StepMetric], path: &Path) -> Result<()> {
    let mut buf = String::new();
    for m in metrics {
        buf.push_str(&serde_json::to_string(m).expect("metric serializes"));
        buf.push('\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}
