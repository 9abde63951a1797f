//! Multiple-choice scoring: extract the predicted choice from a rationale's
//! final step and compare it with ground truth. Works against any gateway
//! backend, and against a trained toy policy through [`PolicyBackend`].

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Choice, McSample};
use crate::error::Error;
use crate::filters::{normalize, parse_steps};
use crate::gateway::{self, Backend, RetryPolicy, WireRequest};
use crate::policy::ToyPolicy;
use crate::prompt::{make_eval_request, DecodingParams};
use crate::seed::{derive_seed, request_seed};
use crate::Result;

/// How the prediction was recovered from the final step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractionMode {
    /// The choice's label form "(X)" appeared, uniquely.
    Label,
    /// No label appeared; the choice's text appeared, uniquely.
    Text,
    /// Zero or multiple choices matched.
    None,
}

/// Scoring outcome for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalVerdict {
    Correct,
    Incorrect,
    GenerationError,
}

/// Per-sample scoring row.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRow {
    pub sample_id: String,
    /// Label of the predicted choice, or none when extraction failed.
    pub predicted: Option<String>,
    pub verdict: EvalVerdict,
    pub extraction_mode: ExtractionMode,
}

/// Aggregate accuracy over an eval set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    #[serde(skip)]
    pub per_sample: Vec<EvalRow>,
}

impl EvalReport {
    fn from_rows(per_sample: Vec<EvalRow>) -> Self {
        let total = per_sample.len();
        let correct =
            per_sample.iter().filter(|r| r.verdict == EvalVerdict::Correct).count();
        let accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        EvalReport { total, correct, accuracy, per_sample }
    }
}

/// Pull the predicted choice out of a rationale. The final step (per the
/// step parser) is searched for each choice, case- and whitespace-insensitive:
/// the exact label form "(X)" takes precedence; choice text is consulted only
/// when no label appears. Zero or multiple distinct matches → no prediction.
pub fn extract_answer<'c>(
    rationale_text: &str,
    choices: &'c [Choice],
) -> (Option<&'c Choice>, ExtractionMode) {
    let parse = match parse_steps(rationale_text) {
        Ok(p) => p,
        Err(_) => return (None, ExtractionMode::None),
    };
    let final_step = normalize(&parse.final_step);

    let label_matches: Vec<&Choice> = choices
        .iter()
        .filter(|c| {
            let label = normalize(&c.label);
            !label.is_empty() && final_step.contains(&label)
        })
        .collect();
    match label_matches.len() {
        1 => return (Some(label_matches[0]), ExtractionMode::Label),
        0 => {}
        _ => return (None, ExtractionMode::None),
    }

    let text_matches: Vec<&Choice> = choices
        .iter()
        .filter(|c| {
            let text = normalize(&c.text);
            !text.is_empty() && final_step.contains(&text)
        })
        .collect();
    if text_matches.len() == 1 {
        (Some(text_matches[0]), ExtractionMode::Text)
    } else {
        (None, ExtractionMode::None)
    }
}

/// Score one generated rationale against the sample's correct answer.
pub fn score_sample(sample: &McSample, rationale_text: &str) -> EvalRow {
    let (predicted, mode) = extract_answer(rationale_text, &sample.choices);
    let verdict = match predicted {
        Some(choice) if *choice == sample.correct => EvalVerdict::Correct,
        _ => EvalVerdict::Incorrect,
    };
    EvalRow {
        sample_id: sample.id.clone(),
        predicted: predicted.map(|c| c.label.clone()),
        verdict,
        extraction_mode: mode,
    }
}

/// Generate one rationale per sample with the answer-free prompt, extract,
/// compare, aggregate. Generation failures score as incorrect with verdict
/// "generation-error"; transport failures abort.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    samples: &[McSample],
    manifest_dir: &Path,
    backend: &dyn Backend,
    model_id: &str,
    retry: &RetryPolicy,
    max_parallel: usize,
    decoding: DecodingParams,
    master_seed: u64,
    iteration: u32,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Validation("evaluation needs a nonempty sample set".into()));
    }
    let mut requests = Vec::with_capacity(samples.len());
    for sample in samples {
        let seed = request_seed(master_seed, iteration, &sample.id, "eval", 0);
        requests.push(make_eval_request(sample, decoding, seed, manifest_dir)?);
    }
    let results = gateway::generate_batch(&requests, backend, model_id, retry, max_parallel);
    let mut rows = Vec::with_capacity(samples.len());
    for (sample, result) in samples.iter().zip(results) {
        match result {
            Ok(generation) => rows.push(score_sample(sample, &generation.text)),
            Err(e) if e.is_transport() => return Err(e),
            Err(_) => rows.push(EvalRow {
                sample_id: sample.id.clone(),
                predicted: None,
                verdict: EvalVerdict::GenerationError,
                extraction_mode: ExtractionMode::None,
            }),
        }
    }
    Ok(EvalReport::from_rows(rows))
}

/// Write a report as one summary line followed by one line per sample.
pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let io_err = |source| Error::Io { path: path.display().to_string(), source };
    let mut out = Vec::new();
    let summary = serde_json::to_string(report).expect("report summary serializes");
    writeln!(out, "{summary}").map_err(io_err)?;
    for row in &report.per_sample {
        let line = serde_json::to_string(row).expect("eval row serializes");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    std::fs::write(path, out).map_err(io_err)
}

/// Read back a report written by [`write_report`].
pub fn read_report(path: &Path) -> Result<EvalReport> {
    let raw = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = raw.lines().enumerate();
    let (_, summary_line) = lines.next().ok_or_else(|| Error::Parse {
        path: path.display().to_string(),
        line: 1,
        msg: "empty report".into(),
    })?;
    let mut report: EvalReport =
        serde_json::from_str(summary_line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: e.to_string(),
        })?;
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row: EvalRow = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        report.per_sample.push(row);
    }
    if report.per_sample.len() != report.total {
        return Err(Error::Validation(format!(
            "report at {} declares {} samples but carries {}",
            path.display(),
            report.total,
            report.per_sample.len()
        )));
    }
    Ok(report)
}

/// Adapter that lets a trained toy policy stand in for a remote model:
/// each request seeds the policy's sampler from the request fingerprint and
/// decodes a fixed number of tokens.
pub struct PolicyBackend {
    policy: ToyPolicy,
    max_tokens: usize,
}

impl PolicyBackend {
    pub fn new(policy: ToyPolicy, max_tokens: usize) -> Self {
        PolicyBackend { policy, max_tokens }
    }
}

impl Backend for PolicyBackend {
    fn id(&self) -> &str {
        "policy"
    }

    fn generate_once(&self, request: &WireRequest<'_>) -> Result<String> {
        let fp = gateway::fingerprint(request.prompt_text, request.image_png, &request.decoding);
        let context = (derive_seed(0, &["policy-context", &fp])
            % self.policy.vocab().context_slots() as u64) as usize;
        let seed = derive_seed(0, &["policy-decode", &fp]);
        let tokens = self.policy.sample_sequence(
            context,
            self.max_tokens,
            request.decoding.temperature,
            request.decoding.top_p,
            seed,
        )?;
        let words: Vec<&str> = tokens
            .iter()
            .map(|&t| self.policy.vocab().decode(t).expect("sampled token is in vocabulary"))
            .collect();
        Ok(words.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Choice;
    use crate::gateway::MockBackend;
    use crate::policy::Vocabulary;
    use crate::prompt::build_naive_prompt;

    fn choices() -> Vec<Choice> {
        vec![
            Choice { label: "(A)".into(), text: "3".into() },
            Choice { label: "(B)".into(), text: "4".into() },
        ]
    }

    fn sample(id: &str, image: &str) -> McSample {
        McSample {
            id: id.into(),
            image_path: image.into(),
            question: "How many legs?".into(),
            choices: choices(),
            correct: Choice { label: "(B)".into(), text: "4".into() },
            incorrect: vec![Choice { label: "(A)".into(), text: "3".into() }],
        }
    }

    #[test]
    fn unique_label_wins() {
        let cs = choices();
        let (got, mode) = extract_answer("Step 2, the answer is (B).", &cs);
        assert_eq!(got.unwrap().label, "(B)");
        assert_eq!(mode, ExtractionMode::Label);
    }

    #[test]
    fn two_labels_are_ambiguous() {
        let cs = choices();
        let (got, mode) = extract_answer("Step 2, either (A) or (B).", &cs);
        assert!(got.is_none());
        assert_eq!(mode, ExtractionMode::None);
    }

    #[test]
    fn text_match_fills_in_when_no_label_appears() {
        let cs = choices();
        let (got, mode) = extract_answer("Step 3, so it must be 4.", &cs);
        assert_eq!(got.unwrap().label, "(B)");
        assert_eq!(mode, ExtractionMode::Text);
    }

    #[test]
    fn only_the_final_step_is_searched() {
        let cs = choices();
        let text = "Step 1, it could be (A). Step 2, but it is (B).";
        let (got, mode) = extract_answer(text, &cs);
        assert_eq!(got.unwrap().label, "(B)");
        assert_eq!(mode, ExtractionMode::Label);
    }

    #[test]
    fn label_precedence_beats_text() {
        // "(A)" appears as a label while "4" (the text of B) also appears;
        // the label phase resolves first and never consults texts.
        let cs = choices();
        let (got, mode) = extract_answer("Step 1, 4 legs would imply (A).", &cs);
        assert_eq!(got.unwrap().label, "(A)");
        assert_eq!(mode, ExtractionMode::Label);
    }

    #[test]
    fn matching_ignores_case_and_spacing() {
        let cs = choices();
        let (got, _) = extract_answer("Step 1, THE  ANSWER IS  (b).", &cs);
        assert_eq!(got.unwrap().label, "(B)");
    }

    #[test]
    fn empty_text_has_no_prediction() {
        let cs = choices();
        let (got, mode) = extract_answer("   ", &cs);
        assert!(got.is_none());
        assert_eq!(mode, ExtractionMode::None);
    }

    #[test]
    fn scoring_compares_with_ground_truth() {
        let s = sample("s1", "img.png");
        assert_eq!(score_sample(&s, "Step 1, it is (B).").verdict, EvalVerdict::Correct);
        assert_eq!(score_sample(&s, "Step 1, it is (A).").verdict, EvalVerdict::Incorrect);
        let row = score_sample(&s, "Step 1, unclear.");
        assert_eq!(row.verdict, EvalVerdict::Incorrect);
        assert!(row.predicted.is_none());
    }

    fn write_image(dir: &Path, name: &str) {
        // Tint per file name so distinct samples yield distinct request
        // fingerprints even when question and choices coincide.
        let tint = name.bytes().fold(0u8, |a, b| a.wrapping_add(b));
        let img = image::RgbImage::from_pixel(4, 4, image::Rgb([tint, 20, 30]));
        img.save(dir.join(name)).unwrap();
    }

    #[test]
    fn evaluate_scores_a_scripted_backend() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "a.png");
        write_image(dir.path(), "b.png");
        let samples = vec![sample("s1", "a.png"), sample("s2", "b.png")];
        let mut backend = MockBackend::new(false);
        let decoding = DecodingParams::default();
        for (i, s) in samples.iter().enumerate() {
            let req = make_eval_request(
                s,
                decoding,
                request_seed(7, 1, &s.id, "eval", 0),
                dir.path(),
            )
            .unwrap();
            let fp = gateway::request_fingerprint(&req);
            // First sample answers correctly, second picks the wrong label.
            let text = if i == 0 { "Step 1, (B)." } else { "Step 1, (A)." };
            backend.insert(fp, text.into());
        }
        let report = evaluate(
            &samples,
            dir.path(),
            &backend,
            "toy",
            &RetryPolicy { max_attempts: 1, backoff_base_ms: 1 },
            2,
            decoding,
            7,
            1,
        )
        .unwrap();
        assert_eq!(report.total, 2);
        assert_eq!(report.correct, 1);
        assert!((report.accuracy - 0.5).abs() < 1e-12);
        assert_eq!(report.per_sample[0].verdict, EvalVerdict::Correct);
        assert_eq!(report.per_sample[1].verdict, EvalVerdict::Incorrect);
    }

    #[test]
    fn generation_failures_score_as_generation_error() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "a.png");
        let samples = vec![sample("s1", "a.png")];
        // Nothing scripted and no default: every request is an empty output.
        let backend = MockBackend::new(false);
        let report = evaluate(
            &samples,
            dir.path(),
            &backend,
            "toy",
            &RetryPolicy { max_attempts: 1, backoff_base_ms: 1 },
            1,
            DecodingParams::default(),
            7,
            1,
        )
        .unwrap();
        assert_eq!(report.correct, 0);
        assert_eq!(report.per_sample[0].verdict, EvalVerdict::GenerationError);
        assert_eq!(report.per_sample[0].extraction_mode, ExtractionMode::None);
    }

    /// Backend that records every prompt it sees.
    struct Recording {
        prompts: std::sync::Mutex<Vec<String>>,
    }

    impl Backend for Recording {
        fn id(&self) -> &str {
            "recording"
        }
        fn generate_once(&self, request: &WireRequest<'_>) -> Result<String> {
            self.prompts.lock().unwrap().push(request.prompt_text.to_string());
            Ok("Step 1, (B).".into())
        }
    }

    #[test]
    fn evaluate_only_ever_sends_answer_free_prompts() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "a.png");
        let samples = vec![sample("s1", "a.png")];
        let backend = Recording { prompts: std::sync::Mutex::new(Vec::new()) };
        evaluate(
            &samples,
            dir.path(),
            &backend,
            "toy",
            &RetryPolicy { max_attempts: 1, backoff_base_ms: 1 },
            1,
            DecodingParams::default(),
            7,
            1,
        )
        .unwrap();
        let prompts = backend.prompts.lock().unwrap();
        let expected = build_naive_prompt(&samples[0].question, &samples[0].choices).unwrap();
        assert_eq!(prompts.len(), 1);
        assert_eq!(prompts[0], expected);
        assert!(
            !prompts[0].contains("The correct answer to the question is"),
            "eval prompt leaked the answer: {}",
            prompts[0]
        );
    }

    #[test]
    fn accuracy_is_order_invariant() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "a.png");
        write_image(dir.path(), "b.png");
        write_image(dir.path(), "c.png");
        let mut samples =
            vec![sample("s1", "a.png"), sample("s2", "b.png"), sample("s3", "c.png")];
        let backend = MockBackend::new(true);
        let run = |samples: &[McSample]| {
            evaluate(
                samples,
                dir.path(),
                &backend,
                "toy",
                &RetryPolicy { max_attempts: 1, backoff_base_ms: 1 },
                2,
                DecodingParams::default(),
                7,
                1,
            )
            .unwrap()
            .accuracy
        };
        let forward = run(&samples);
        samples.reverse();
        assert_eq!(forward, run(&samples));
    }

    #[test]
    fn report_roundtrip_and_summary_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.jsonl");
        let rows = vec![
            EvalRow {
                sample_id: "s1".into(),
                predicted: Some("(B)".into()),
                verdict: EvalVerdict::Correct,
                extraction_mode: ExtractionMode::Label,
            },
            EvalRow {
                sample_id: "s2".into(),
                predicted: None,
                verdict: EvalVerdict::GenerationError,
                extraction_mode: ExtractionMode::None,
            },
        ];
        let report = EvalReport::from_rows(rows);
        write_report(&path, &report).unwrap();
        let raw = std::fs::read_to_string(&path).unwrap();
        let mut lines = raw.lines();
        assert_eq!(
            lines.next().unwrap(),
            "{\"total\":2,\"correct\":1,\"accuracy\":0.5}"
        );
        assert_eq!(
            lines.next().unwrap(),
            "{\"sample_id\":\"s1\",\"predicted\":\"(B)\",\"verdict\":\"correct\",\"extraction_mode\":\"label\"}"
        );
        assert_eq!(
            lines.next().unwrap(),
            "{\"sample_id\":\"s2\",\"predicted\":null,\"verdict\":\"generation-error\",\"extraction_mode\":\"none\"}"
        );
        let back = read_report(&path).unwrap();
        assert_eq!(back.total, 2);
        assert_eq!(back.per_sample.len(), 2);
        assert_eq!(back.per_sample[1].verdict, EvalVerdict::GenerationError);
    }

    #[test]
    fn policy_backend_is_deterministic_and_never_leaks_context_tokens() {
        let vocab = Vocabulary::build(
            ["step one the answer is four", "step two look closely"],
            4,
        )
        .unwrap();
        let policy = ToyPolicy::random(vocab, 99, 0.5);
        let backend = PolicyBackend::new(policy, 12);
        let wire = WireRequest {
            model: "toy",
            prompt_text: "Q (A) 3 (B) 4 Please answer the question step-by-step!",
            image_png: b"png-bytes",
            decoding: DecodingParams::default(),
        };
        let a = backend.generate_once(&wire).unwrap();
        let b = backend.generate_once(&wire).unwrap();
        assert_eq!(a, b);
        assert!(!a.contains("<ctx"), "sampled text leaked a context token: {a}");
        assert!(!a.trim().is_empty());
    }
}
