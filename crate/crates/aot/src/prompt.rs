//! Prompt construction: the answer-oriented template that asks the backend to
//! justify a supplied answer step by step, the plain step-by-step template
//! used for evaluation, incorrect-answer selection for the negative branch,
//! and request packaging.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, FloatImage, NoiseSchedule};
use crate::dataset::{AugmentationDescriptor, Choice, McSample, Polarity, PromptKind};
use crate::error::Error;
use crate::seed::derive_seed;
use crate::Result;

/// Answer-oriented prompt template. `[Question]`, `[Choices]`, and `[Answer]`
/// are the substitution slots. The same text is exported to
/// `docs/prompts.md`; a golden test keeps the two copies identical.
pub const AOT_TEMPLATE: &str = "There is a question about this image, which is \"[Question][Choices]\". The correct answer to the question is \"[Answer]\". Why? Please provide concise and direct step-by-step reasoning in the format: 'Step 1, ... Step 2, ...'. Make sure to keep the number of steps as few as possible, and provide the correct answer in the final step.";

/// Plain step-by-step prompt template with no answer slot.
pub const NAIVE_TEMPLATE: &str = "[Question][Choices] Please answer the question step-by-step!";

/// Decoding parameters transmitted verbatim to the backend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for DecodingParams {
    fn default() -> Self {
        DecodingParams { temperature: 0.7, top_p: 0.9 }
    }
}

impl DecodingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature <= 2.0) {
            return Err(Error::Validation(format!(
                "temperature {} outside (0, 2]",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Validation(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        Ok(())
    }
}

/// One ready-to-send generation request: prompt text plus the (possibly
/// augmented) image encoded as PNG bytes.
#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub sample_id: String,
    pub prompt_kind: PromptKind,
    pub prompt_text: String,
    pub image_png: Vec<u8>,
    pub decoding: DecodingParams,
    /// Polarity of the requested rationale; `None` for evaluation requests.
    pub polarity: Option<Polarity>,
    /// The answer the prompt asks to justify; `None` for evaluation requests.
    pub target: Option<Choice>,
    pub rng_seed: u64,
    pub augmentation: Option<AugmentationDescriptor>,
}

/// Render the choice list as it appears inside prompts: `"(A) 3 (B) 4"`.
pub fn render_choices(choices: &[Choice]) -> String {
    choices.iter().map(Choice::render).collect::<Vec<_>>().join(" ")
}

fn check_question_and_choices(question: &str, choices: &[Choice]) -> Result<()> {
    if question.trim().is_empty() {
        return Err(Error::Validation("question is empty".into()));
    }
    if choices.is_empty() {
        return Err(Error::Validation("choice list is empty".into()));
    }
    Ok(())
}

/// Build the answer-oriented prompt for `answer`. Errors if `answer` is not
/// one of `choices` (this guards positive/negative polarity integrity).
pub fn build_aot_prompt(question: &str, choices: &[Choice], answer: &Choice) -> Result<String> {
    check_question_and_choices(question, choices)?;
    if !choices.contains(answer) {
        return Err(Error::Validation(format!(
            "answer {} is not among the choices",
            answer.render()
        )));
    }
    // Split the template at its slots once; slot values are never rescanned,
    // so user text containing a literal slot name survives untouched.
    let (head, rest) = AOT_TEMPLATE
        .split_once("[Question][Choices]")
        .expect("template has the question/choices slot");
    let (mid, tail) = rest.split_once("[Answer]").expect("template has the answer slot");
    Ok(format!(
        "{head}{question}{}{mid}{}{tail}",
        render_choices(choices),
        answer.render()
    ))
}

/// Build the plain step-by-step prompt used for evaluation.
pub fn build_naive_prompt(question: &str, choices: &[Choice]) -> Result<String> {
    check_question_and_choices(question, choices)?;
    let (head, tail) = NAIVE_TEMPLATE
        .split_once("[Question][Choices]")
        .expect("template has the question/choices slot");
    Ok(format!("{head}{question}{}{tail}", render_choices(choices)))
}

/// Uniformly select one incorrect answer; deterministic under `rng_seed`.
pub fn select_incorrect_answer(sample: &McSample, rng_seed: u64) -> Result<Choice> {
    if sample.incorrect.is_empty() {
        return Err(Error::Validation(format!(
            "sample {}: no incorrect answers available for the negative branch",
            sample.id
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    let idx = rng.random_range(0..sample.incorrect.len());
    Ok(sample.incorrect[idx].clone())
}

/// Package one generation request for `sample`.
///
/// Positive requests carry the original image bytes unchanged and target the
/// correct answer. Negative requests select an incorrect answer (sub-seed
/// `"pick"`) and attach the augmented image (sub-seed `"augment"`), using
/// `base_augment` as the augmentation parameters.
pub fn make_requests(
    sample: &McSample,
    polarity: Polarity,
    base_augment: Option<&AugmentationDescriptor>,
    decoding: DecodingParams,
    rng_seed: u64,
    schedule: &NoiseSchedule,
    manifest_dir: &Path,
) -> Result<GenerationRequest> {
    decoding.validate()?;
    let image_file = resolve_image_path(manifest_dir, &sample.image_path);
    let (prompt_text, target, image_png, augmentation) = match polarity {
        Polarity::Positive => {
            let prompt = build_aot_prompt(&sample.question, &sample.choices, &sample.correct)?;
            let bytes = std::fs::read(&image_file)
                .map_err(|e| Error::io(image_file.display().to_string(), e))?;
            (prompt, sample.correct.clone(), bytes, None)
        }
        Polarity::Negative => {
            let descriptor = base_augment.ok_or_else(|| {
                Error::Validation(format!(
                    "sample {}: negative request requires an augmentation descriptor",
                    sample.id
                ))
            })?;
            let target = select_incorrect_answer(sample, derive_seed(rng_seed, &["pick"]))?;
            let prompt = build_aot_prompt(&sample.question, &sample.choices, &target)?;
            let seeded = descriptor.with_seed(derive_seed(rng_seed, &["augment"]));
            let image = FloatImage::load(&image_file)?;
            let augmented = augment::apply(&seeded, &image, schedule)?;
            (prompt, target, augmented.to_png_bytes()?, Some(seeded))
        }
    };
    Ok(GenerationRequest {
        sample_id: sample.id.clone(),
        prompt_kind: PromptKind::AoT,
        prompt_text,
        image_png,
        decoding,
        polarity: Some(polarity),
        target: Some(target),
        rng_seed,
        augmentation,
    })
}

/// Package one evaluation request: plain prompt, original image, no target.
pub fn make_eval_request(
    sample: &McSample,
    decoding: DecodingParams,
    rng_seed: u64,
    manifest_dir: &Path,
) -> Result<GenerationRequest> {
    decoding.validate()?;
    let image_file = resolve_image_path(manifest_dir, &sample.image_path);
    let bytes =
        std::fs::read(&image_file).map_err(|e| Error::io(image_file.display().to_string(), e))?;
    Ok(GenerationRequest {
        sample_id: sample.id.clone(),
        prompt_kind: PromptKind::Naive,
        prompt_text: build_naive_prompt(&sample.question, &sample.choices)?,
        image_png: bytes,
        decoding,
        polarity: None,
        target: None,
        rng_seed,
        augmentation: None,
    })
}

/// Image paths in manifests are interpreted relative to the manifest's
/// directory unless absolute.
pub fn resolve_image_path(manifest_dir: &Path, image_path: &str) -> std::path::PathBuf {
    let p = Path::new(image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_dir.join(p)
    }
}
