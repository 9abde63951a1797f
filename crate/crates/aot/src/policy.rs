//! Toy bigram token policy: a V x V logit table whose row-softmax defines the
//! next-token distribution. It preserves every quantity preference
//! optimization needs — token-factorized log-probabilities, a frozen
//! reference copy, scaled margins — while staying small enough for exact
//! gradients and brute-force oracles.
//!
//! Conditioning on the (image, question) context is modeled by hashing the
//! pair into a reserved range of context tokens that can start a sequence
//! but are never generated.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::filters::tokenize_words;
use crate::seed::derive_seed;
use crate::Result;

/// Token table: reserved context slots, an unknown-word bucket, then words in
/// first-seen order. Encoding and decoding are exact inverses on known
/// tokens; unknown words map to the unknown bucket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    context_slots: usize,
    index: HashMap<String, usize>,
}

pub const UNK_TOKEN: &str = "<unk>";

fn context_name(slot: usize) -> String {
    format!("<ctx{slot:02}>")
}

impl Vocabulary {
    /// Build a vocabulary from text, with `context_slots` reserved start
    /// tokens. Words are tokenized exactly like the circularity filter
    /// tokenizes them and added in first-seen order.
    pub fn build<I, S>(texts: I, context_slots: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if context_slots == 0 {
            return Err(Error::Validation("need at least one context slot".into()));
        }
        let mut tokens: Vec<String> = (0..context_slots).map(context_name).collect();
        tokens.push(UNK_TOKEN.to_string());
        let mut index = HashMap::new();
        for text in texts {
            for word in tokenize_words(text.as_ref()) {
                if !index.contains_key(&word) {
                    index.insert(word.clone(), tokens.len());
                    tokens.push(word);
                }
            }
        }
        Ok(Vocabulary { tokens, context_slots, index })
    }

    /// Reconstruct a vocabulary from a checkpoint's token listing.
    pub fn from_tokens(tokens: Vec<String>, context_slots: usize) -> Result<Self> {
        if context_slots == 0 || tokens.len() < context_slots + 1 {
            return Err(Error::Validation(format!(
                "token listing of {} entries cannot hold {context_slots} context slots plus {UNK_TOKEN}",
                tokens.len()
            )));
        }
        for (slot, token) in tokens[..context_slots].iter().enumerate() {
            if *token != context_name(slot) {
                return Err(Error::Validation(format!(
                    "token {slot} should be the context slot {} but is {token:?}",
                    context_name(slot)
                )));
            }
        }
        if tokens[context_slots] != UNK_TOKEN {
            return Err(Error::Validation(format!(
                "token {context_slots} should be {UNK_TOKEN} but is {:?}",
                tokens[context_slots]
            )));
        }
        let mut index = HashMap::new();
        for (i, token) in tokens.iter().enumerate().skip(context_slots + 1) {
            if index.insert(token.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate token {token:?} in listing")));
            }
        }
        Ok(Vocabulary { tokens, context_slots, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn context_slots(&self) -> usize {
        self.context_slots
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Index of the unknown-word bucket.
    pub fn unk(&self) -> usize {
        self.context_slots
    }

    /// First generatable token index (everything below is a context slot or
    /// the unknown bucket).
    pub fn first_word(&self) -> usize {
        self.context_slots + 1
    }

    pub fn encode_word(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(self.unk())
    }

    /// Tokenize and encode a rationale text.
    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        tokenize_words(text).iter().map(|w| self.encode_word(w)).collect()
    }

    pub fn decode(&self, idx: usize) -> Option<&str> {
        self.tokens.get(idx).map(String::as_str)
    }

    /// Deterministic context token for an (image, question) pair.
    pub fn context_token(&self, image_path: &str, question: &str) -> usize {
        (derive_seed(0, &["context", image_path, question]) % self.context_slots as u64) as usize
    }
}

/// Serialized checkpoint layout (JSON, fixed key order).
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    context_slots: usize,
    v: usize,
    tokens: Vec<String>,
    params: Vec<f64>,
}

const CHECKPOINT_VERSION: u32 = 1;

/// Bigram policy: `params[prev * V + next]` is the logit of `next` after
/// `prev`; each row's softmax is the next-token distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    vocab: Vocabulary,
    params: Vec<f64>,
}

impl ToyPolicy {
    /// Uniform policy (all logits zero).
    pub fn zeros(vocab: Vocabulary) -> Self {
        let v = vocab.size();
        ToyPolicy { vocab, params: vec![0.0; v * v] }
    }

    /// Random logits scaled by `scale`, for tests and oracles.
    pub fn random(vocab: Vocabulary, rng_seed: u64, scale: f64) -> Self {
        let v = vocab.size();
        let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
        let params = (0..v * v).map(|_| rng.random_range(-scale..=scale)).collect();
        ToyPolicy { vocab, params }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn v(&self) -> usize {
        self.vocab.size()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_token(&self, idx: usize) -> Result<()> {
        if idx >= self.v() {
            return Err(Error::Validation(format!(
                "token index {idx} outside vocabulary of size {}",
                self.v()
            )));
        }
        Ok(())
    }

    /// Softmax of row `prev`.
    pub fn row_softmax(&self, prev: usize) -> Vec<f64> {
        let v = self.v();
        let row = &self.params[prev * v..(prev + 1) * v];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|&e| e / sum).collect()
    }

    /// Log-softmax of row `prev`, computed stably.
    pub fn row_log_softmax(&self, prev: usize) -> Vec<f64> {
        let v = self.v();
        let row = &self.params[prev * v..(prev + 1) * v];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        row.iter().map(|&x| x - lse).collect()
    }

    /// Log-probability of one token after `prev`.
    pub fn token_logprob(&self, prev: usize, next: usize) -> Result<f64> {
        self.check_token(prev)?;
        self.check_token(next)?;
        Ok(self.row_log_softmax(prev)[next])
    }

    pub fn to_json_string(&self) -> String {
        let checkpoint = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            context_slots: self.vocab.context_slots,
            v: self.v(),
            tokens: self.vocab.tokens.clone(),
            params: self.params.clone(),
        };
        serde_json::to_string(&checkpoint).expect("checkpoint serializes")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)
            .map_err(|e| Error::Validation(format!("malformed checkpoint: {e}")))?;
        if c.format_version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint format_version {}",
                c.format_version
            )));
        }
        if c.v != c.tokens.len() {
            return Err(Error::Validation(format!(
                "checkpoint claims v = {} but lists {} tokens",
                c.v,
                c.tokens.len()
            )));
        }
        if c.params.len() != c.v * c.v {
            return Err(Error::Validation(format!(
                "checkpoint has {} params, expected {}",
                c.params.len(),
                c.v * c.v
            )));
        }
        if let Some(bad) = c.params.iter().find(|p| !p.is_finite()) {
            return Err(Error::Validation(format!("checkpoint contains non-finite param {bad}")));
        }
        let vocab = Vocabulary::from_tokens(c.tokens, c.context_slots)?;
        Ok(ToyPolicy { vocab, params: c.params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json_string();
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json_str(&text)
    }

    /// Sample one continuation with nucleus sampling: from the smallest set
    /// of tokens whose cumulative probability reaches `top_p` (after
    /// temperature scaling), renormalized. Context slots are never emitted.
    pub fn sample_sequence(
        &self,
        context: usize,
        max_tokens: usize,
        temperature: f64,
        top_p: f64,
        rng_seed: u64,
    ) -> Result<Vec<usize>> {
        self.check_token(context)?;
        if !temperature.is_finite() || temperature <= 0.0 {
            return Err(Error::Validation(format!(
                "temperature {temperature} must be a positive finite number"
            )));
        }
        if !top_p.is_finite() || top_p <= 0.0 || top_p > 1.0 {
            return Err(Error::Validation(format!("top_p {top_p} outside (0, 1]")));
        }
        let v = self.v();
        let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
        let mut prev = context;
        let mut out = Vec::with_capacity(max_tokens);
        for _ in 0..max_tokens {
            let row = &self.params[prev * v..(prev + 1) * v];
            // Temperature-scaled softmax over generatable tokens only.
            let m = row[self.vocab.unk()..]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let mut probs: Vec<(usize, f64)> = (self.vocab.unk()..v)
                .map(|j| (j, ((row[j] - m) / temperature).exp()))
                .collect();
            let sum: f64 = probs.iter().map(|(_, p)| p).sum();
            for p in &mut probs {
                p.1 /= sum;
            }
            // Nucleus: keep the most probable tokens until top_p is reached.
            probs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let mut cumulative = 0.0;
            let mut cut = probs.len();
            for (i, (_, p)) in probs.iter().enumerate() {
                cumulative += p;
                if cumulative >= top_p {
                    cut = i + 1;
                    break;
                }
            }
            let nucleus = &probs[..cut];
            let mass: f64 = nucleus.iter().map(|(_, p)| p).sum();
            let mut draw = rng.random::<f64>() * mass;
            let mut chosen = nucleus[nucleus.len() - 1].0;
            for &(j, p) in nucleus {
                if draw < p {
                    chosen = j;
                    break;
                }
                draw -= p;
            }
            out.push(chosen);
            prev = chosen;
        }
        Ok(out)
    }
}
