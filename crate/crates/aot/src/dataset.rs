//! Canonical data types and the line-delimited file formats for samples,
//! rationale records, and preference pairs. All writers emit keys in the
//! fixed order given by the struct definitions, so identical values always
//! produce byte-identical files.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// One labeled answer option, e.g. label `"(B)"` with text `"4"`.
///
/// The label is stored exactly as it appears in the manifest (conventionally
/// including the surrounding parentheses) and is treated as an opaque string.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Choice {
    pub label: String,
    pub text: String,
}

impl Choice {
    pub fn new(label: impl Into<String>, text: impl Into<String>) -> Self {
        Choice { label: label.into(), text: text.into() }
    }

    /// Rendering used in prompts and answer matching: label, space, text.
    pub fn render(&self) -> String {
        format!("{} {}", self.label, self.text)
    }
}

/// One multiple-choice item: an image, a question, the ordered option list,
/// the correct option, and the remaining (incorrect) options.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSample {
    pub id: String,
    pub image_path: String,
    pub question: String,
    pub choices: Vec<Choice>,
    pub correct: Choice,
    pub incorrect: Vec<Choice>,
}

impl McSample {
    /// Check every documented invariant; returns a message naming the breach.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("id is empty".into());
        }
        if self.image_path.is_empty() {
            return Err(format!("sample {}: image_path is empty", self.id));
        }
        if self.question.trim().is_empty() {
            return Err(format!("sample {}: question is empty", self.id));
        }
        if self.choices.len() < 2 {
            return Err(format!("sample {}: fewer than 2 choices", self.id));
        }
        let mut seen = BTreeSet::new();
        for c in &self.choices {
            if !seen.insert((c.label.as_str(), c.text.as_str())) {
                return Err(format!("sample {}: duplicate choice {}", self.id, c.render()));
            }
        }
        if !self.choices.contains(&self.correct) {
            return Err(format!(
                "sample {}: correct answer {} not among choices",
                self.id,
                self.correct.render()
            ));
        }
        if self.incorrect.is_empty() {
            return Err(format!("sample {}: incorrect answer set is empty", self.id));
        }
        for c in &self.incorrect {
            if !self.choices.contains(c) {
                return Err(format!(
                    "sample {}: incorrect answer {} not among choices",
                    self.id,
                    c.render()
                ));
            }
            if *c == self.correct {
                return Err(format!(
                    "sample {}: incorrect set contains the correct answer {}",
                    self.id,
                    c.render()
                ));
            }
        }
        // The correct answer plus the incorrect set must cover the choices
        // exactly: no option may be missing from both sides.
        if self.incorrect.len() != self.choices.len() - 1 {
            return Err(format!(
                "sample {}: choices must equal correct + incorrect exactly ({} choices, {} incorrect)",
                self.id,
                self.choices.len(),
                self.incorrect.len()
            ));
        }
        Ok(())
    }
}

/// Which side of a preference pair a rationale is generated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        }
    }
}

/// Prompt style used for a generation request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptKind {
    /// Answer-oriented prompt: supplies a candidate answer and asks for
    /// step-by-step justification.
    AoT,
    /// Plain step-by-step prompt with no answer slot; used for evaluation.
    Naive,
}

/// Image transformation parameters recorded in provenance. `erase_area` is
/// the inclusive [min, max] range of the erased/cropped area fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationDescriptor {
    pub noise_step: usize,
    pub flip_prob: f64,
    pub erase_prob: f64,
    pub erase_area: [f64; 2],
    pub use_crop: bool,
    pub rng_seed: u64,
}

impl AugmentationDescriptor {
    /// Copy of this descriptor with a different seed.
    pub fn with_seed(&self, rng_seed: u64) -> Self {
        AugmentationDescriptor { rng_seed, ..self.clone() }
    }

    pub fn validate(&self, total_steps: usize) -> std::result::Result<(), String> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(format!("flip_prob {} outside [0,1]", self.flip_prob));
        }
        if !(0.0..=1.0).contains(&self.erase_prob) {
            return Err(format!("erase_prob {} outside [0,1]", self.erase_prob));
        }
        if self.noise_step > total_steps {
            return Err(format!(
                "noise_step {} exceeds schedule total {}",
                self.noise_step, total_steps
            ));
        }
        let [lo, hi] = self.erase_area;
        if !(lo > 0.0 && hi < 1.0 && lo <= hi) {
            return Err(format!("erase_area [{lo},{hi}] must satisfy 0 < min <= max < 1"));
        }
        Ok(())
    }
}

/// Everything needed to reproduce one generation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub prompt_kind: PromptKind,
    pub backend_id: String,
    pub temperature: f64,
    pub top_p: f64,
    pub rng_seed: u64,
    pub augmentation: Option<AugmentationDescriptor>,
}

/// Outcome of one quality filter on one record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    /// Filter not yet run.
    Pending,
    Pass,
    Fail,
    /// Filter intentionally skipped for this record (circularity on negatives).
    NotApplied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Verdicts {
    pub conclusion: Verdict,
    pub circularity: Verdict,
}

impl Default for Verdicts {
    fn default() -> Self {
        Verdicts { conclusion: Verdict::Pending, circularity: Verdict::Pending }
    }
}

/// A generated rationale with its provenance and filter verdicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RationaleRecord {
    pub sample_id: String,
    pub polarity: Polarity,
    /// The answer the rationale was asked to justify: the correct answer for
    /// positive records, the selected incorrect answer for negative ones.
    pub target: Choice,
    pub rationale_text: String,
    /// Step texts parsed from `rationale_text`; re-parsing is idempotent.
    pub steps: Vec<String>,
    pub provenance: Provenance,
    pub verdicts: Verdicts,
}

impl RationaleRecord {
    /// Check polarity/target consistency against the referenced sample.
    pub fn validate_against(&self, sample: &McSample) -> std::result::Result<(), String> {
        if self.sample_id != sample.id {
            return Err(format!(
                "record for {} checked against sample {}",
                self.sample_id, sample.id
            ));
        }
        match self.polarity {
            Polarity::Positive => {
                if self.target != sample.correct {
                    return Err(format!(
                        "positive record for {} targets {} instead of the correct answer",
                        self.sample_id,
                        self.target.render()
                    ));
                }
            }
            Polarity::Negative => {
                if !sample.incorrect.contains(&self.target) {
                    return Err(format!(
                        "negative record for {} targets {} which is not an incorrect answer",
                        self.sample_id,
                        self.target.render()
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Provenance of both sides of a preference pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairProvenance {
    pub positive: Provenance,
    pub negative: Provenance,
}

/// An aligned (image, question, chosen rationale, rejected rationale) tuple
/// ready for preference optimization. Field order here is the documented
/// line format; do not reorder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub sample_id: String,
    pub image_path: String,
    pub question: String,
    pub choices: Vec<Choice>,
    pub chosen: String,
    pub rejected: String,
    pub iteration: u32,
    pub provenance: PairProvenance,
}

impl PreferencePair {
    /// Structural invariants checkable without the underlying records.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.sample_id.is_empty() {
            return Err("pair has empty sample_id".into());
        }
        if self.chosen.trim().is_empty() {
            return Err(format!("pair {}: chosen rationale is empty", self.sample_id));
        }
        if self.rejected.trim().is_empty() {
            return Err(format!("pair {}: rejected rationale is empty", self.sample_id));
        }
        if self.iteration < 1 {
            return Err(format!("pair {}: iteration must be >= 1", self.sample_id));
        }
        if self.choices.len() < 2 {
            return Err(format!("pair {}: fewer than 2 choices", self.sample_id));
        }
        Ok(())
    }
}

fn read_lines<T, F>(path: &Path, mut parse: F) -> Result<Vec<T>>
where
    F: FnMut(&str, usize) -> Result<T>,
{
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(&line, lineno)?);
    }
    Ok(out)
}

/// Read and validate a sample manifest (one JSON record per line).
pub fn read_manifest(path: &Path) -> Result<Vec<McSample>> {
    read_lines(path, |line, lineno| {
        let sample: McSample = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: lineno,
            msg: e.to_string(),
        })?;
        sample.validate().map_err(|msg| Error::Parse {
            path: path.display().to_string(),
            line: lineno,
            msg,
        })?;
        Ok(sample)
    })
}

fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)
            .map_err(|e| Error::Validation(format!("serialization failed: {e}")))?;
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Write samples one JSON record per line (inverse of `read_manifest`).
pub fn write_manifest(samples: &[McSample], path: &Path) -> Result<()> {
    for s in samples {
        s.validate().map_err(Error::Validation)?;
    }
    write_jsonl(samples, path)
}

/// Write preference pairs one per line, refusing on any invariant breach.
/// Output is byte-identical across runs for identical input.
pub fn write_pairs(pairs: &[PreferencePair], path: &Path) -> Result<()> {
    for p in pairs {
        p.validate().map_err(Error::Validation)?;
    }
    write_jsonl(pairs, path)
}

/// Read preference pairs written by `write_pairs`.
pub fn read_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    read_lines(path, |line, lineno| {
        let pair: PreferencePair = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: lineno,
            msg: e.to_string(),
        })?;
        pair.validate().map_err(|msg| Error::Parse {
            path: path.display().to_string(),
            line: lineno,
            msg,
        })?;
        Ok(pair)
    })
}

/// Write rationale records one per line.
pub fn write_records(records: &[RationaleRecord], path: &Path) -> Result<()> {
    write_jsonl(records, path)
}

/// Read rationale records written by `write_records`.
pub fn read_records(path: &Path) -> Result<Vec<RationaleRecord>> {
    read_lines(path, |line, lineno| {
        serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: lineno,
            msg: e.to_string(),
        })
    })
}

/// Draw `m` samples uniformly without replacement from `samples`, excluding
/// ids in `used`. Deterministic under `rng_seed`.
pub fn sample_pool(
    samples: &[McSample],
    m: usize,
    used: &BTreeSet<String>,
    rng_seed: u64,
) -> Result<Vec<McSample>> {
    let mut unused: Vec<&McSample> = samples.iter().filter(|s| !used.contains(&s.id)).collect();
    if unused.len() < m {
        return Err(Error::Validation(format!(
            "pool shortfall: requested {m} samples but only {} remain unused",
            unused.len()
        )));
    }
    // Partial Fisher–Yates: after i swaps the prefix holds a uniform draw
    // without replacement.
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    for i in 0..m {
        let j = rng.random_range(i..unused.len());
        unused.swap(i, j);
    }
    Ok(unused[..m].iter().map(|s| (*s).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample(id: &str) -> McSample {
        McSample {
            id: id.into(),
            image_path: format!("images/{id}.png"),
            question: "What is 2+2?".into(),
            choices: vec![Choice::new("(A)", "3"), Choice::new("(B)", "4")],
            correct: Choice::new("(B)", "4"),
            incorrect: vec![Choice::new("(A)", "3")],
        }
    }

    fn write_temp(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn minimal_valid_record_parses() {
        let line = r#"{"id":"s1","image_path":"img.png","question":"Q?","choices":[{"label":"(A)","text":"x"},{"label":"(B)","text":"y"}],"correct":{"label":"(B)","text":"y"},"incorrect":[{"label":"(A)","text":"x"}]}"#;
        let f = write_temp(&[line]);
        let samples = read_manifest(f.path()).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].choices.len(), 2);
        assert_eq!(samples[0].correct.label, "(B)");
    }

    #[test]
    fn correct_answer_missing_from_choices_is_rejected() {
        let line = r#"{"id":"s1","image_path":"img.png","question":"Q?","choices":[{"label":"(A)","text":"x"},{"label":"(B)","text":"y"}],"correct":{"label":"(C)","text":"z"},"incorrect":[{"label":"(A)","text":"x"}]}"#;
        let f = write_temp(&[line]);
        let err = read_manifest(f.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":1:"), "error should name line 1: {msg}");
        assert!(msg.contains("s1"), "error should name the sample: {msg}");
    }

    #[test]
    fn malformed_line_names_line_number() {
        let good = r#"{"id":"s1","image_path":"img.png","question":"Q?","choices":[{"label":"(A)","text":"x"},{"label":"(B)","text":"y"}],"correct":{"label":"(B)","text":"y"},"incorrect":[{"label":"(A)","text":"x"}]}"#;
        let f = write_temp(&[good, "{not json"]);
        let err = read_manifest(f.path()).unwrap_err();
        assert!(err.to_string().contains(":2:"), "got: {err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn three_line_fixture_preserves_order() {
        let samples = vec![sample("a"), sample("b"), sample("c")];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_manifest(&samples, f.path()).unwrap();
        let back = read_manifest(f.path()).unwrap();
        assert_eq!(back, samples);
    }

    #[test]
    fn incorrect_set_must_cover_remaining_choices() {
        let mut s = sample("s1");
        s.choices.push(Choice::new("(C)", "5"));
        // incorrect still has one entry: (C) is in neither set.
        assert!(s.validate().unwrap_err().contains("exactly"));
    }

    #[test]
    fn incorrect_set_containing_correct_is_rejected() {
        let mut s = sample("s1");
        s.incorrect = vec![s.correct.clone()];
        assert!(s.validate().is_err());
    }

    #[test]
    fn empty_pair_list_writes_empty_file() {
        let f = tempfile::NamedTempFile::new().unwrap();
        write_pairs(&[], f.path()).unwrap();
        assert_eq!(fs::read(f.path()).unwrap().len(), 0);
    }

    fn pair(id: &str) -> PreferencePair {
        let prov = Provenance {
            prompt_kind: PromptKind::AoT,
            backend_id: "mock".into(),
            temperature: 0.7,
            top_p: 0.9,
            rng_seed: 7,
            augmentation: None,
        };
        PreferencePair {
            sample_id: id.into(),
            image_path: "img.png".into(),
            question: "Q?".into(),
            choices: vec![Choice::new("(A)", "x"), Choice::new("(B)", "y")],
            chosen: "Step 1, because. Step 2, the answer is (B) y.".into(),
            rejected: "Step 1, the answer is (A) x.".into(),
            iteration: 1,
            provenance: PairProvenance { positive: prov.clone(), negative: prov },
        }
    }

    #[test]
    fn pairs_round_trip_and_rewrite_is_byte_identical() {
        let pairs = vec![pair("s1"), pair("s2")];
        let f1 = tempfile::NamedTempFile::new().unwrap();
        let f2 = tempfile::NamedTempFile::new().unwrap();
        write_pairs(&pairs, f1.path()).unwrap();
        write_pairs(&pairs, f2.path()).unwrap();
        assert_eq!(read_pairs(f1.path()).unwrap(), pairs);
        assert_eq!(fs::read(f1.path()).unwrap(), fs::read(f2.path()).unwrap());
    }

    #[test]
    fn invalid_pair_refused_with_id() {
        let mut p = pair("s9");
        p.chosen = "  ".into();
        let f = tempfile::NamedTempFile::new().unwrap();
        let err = write_pairs(&[p], f.path()).unwrap_err();
        assert!(err.to_string().contains("s9"));
    }

    #[test]
    fn pair_field_order_is_documented_order() {
        let json = serde_json::to_string(&pair("s1")).unwrap();
        let keys = ["sample_id", "image_path", "question", "choices", "chosen", "rejected", "iteration", "provenance"];
        let mut last = 0;
        for k in keys {
            let pos = json.find(&format!("\"{k}\"")).unwrap_or_else(|| panic!("missing key {k}"));
            assert!(pos > last || last == 0, "key {k} out of order");
            last = pos;
        }
    }

    #[test]
    fn pool_is_deterministic_and_excludes_used() {
        let samples: Vec<McSample> = (0..10).map(|i| sample(&format!("s{i:02}"))).collect();
        let mut used = BTreeSet::new();
        used.insert("s03".to_string());
        let a = sample_pool(&samples, 4, &used, 42).unwrap();
        let b = sample_pool(&samples, 4, &used, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.id != "s03"));
        let ids: BTreeSet<_> = a.iter().map(|s| s.id.clone()).collect();
        assert_eq!(ids.len(), 4, "draw is without replacement");
    }

    #[test]
    fn pool_forced_selection_returns_exactly_the_unused_set() {
        let samples: Vec<McSample> = (0..5).map(|i| sample(&format!("s{i}"))).collect();
        let used: BTreeSet<String> = ["s0", "s2"].iter().map(|s| s.to_string()).collect();
        let got = sample_pool(&samples, 3, &used, 1).unwrap();
        let ids: BTreeSet<_> = got.iter().map(|s| s.id.clone()).collect();
        assert_eq!(ids, ["s1", "s3", "s4"].iter().map(|s| s.to_string()).collect());
    }

    #[test]
    fn pool_shortfall_reports_counts() {
        let samples: Vec<McSample> = (0..3).map(|i| sample(&format!("s{i}"))).collect();
        let err = sample_pool(&samples, 4, &BTreeSet::new(), 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("requested 4") && msg.contains("3 remain"), "got: {msg}");
    }

    #[test]
    fn sequential_pools_with_threaded_used_ids_are_disjoint() {
        let samples: Vec<McSample> = (0..20).map(|i| sample(&format!("s{i:02}"))).collect();
        let mut used = BTreeSet::new();
        let p1 = sample_pool(&samples, 8, &used, 11).unwrap();
        used.extend(p1.iter().map(|s| s.id.clone()));
        let p2 = sample_pool(&samples, 8, &used, 12).unwrap();
        let ids1: BTreeSet<_> = p1.iter().map(|s| s.id.clone()).collect();
        let ids2: BTreeSet<_> = p2.iter().map(|s| s.id.clone()).collect();
        assert!(ids1.is_disjoint(&ids2));
    }
}
