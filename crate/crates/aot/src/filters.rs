//! Rationale quality filters: the conclusion filter (the final step must
//! contain the target answer) and the circularity filter (no word n-gram may
//! repeat more than three times), plus the step-structure parser they share
//! and the pairing stage that assembles preference pairs from passing records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{
    Choice, McSample, PairProvenance, Polarity, PreferencePair, RationaleRecord, Verdict,
};
use crate::error::Error;
use crate::Result;

/// How the step structure of a rationale was recovered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    /// Explicit "Step k" markers were found.
    Marker,
    /// No markers: the whole text is treated as a single step.
    Fallback,
}

/// Parsed step structure of a rationale.
#[derive(Debug, Clone, PartialEq)]
pub struct StepParse {
    /// (index as written, step text) in order of appearance.
    pub steps: Vec<(u64, String)>,
    /// Text of the last step (the whole text in fallback mode).
    pub final_step: String,
    pub parse_mode: ParseMode,
    /// Set when marker indices are not exactly 1, 2, 3, ... in order.
    pub non_contiguous: bool,
}

/// Byte offset and parsed index of one "Step k" marker, plus where its body
/// starts.
fn find_markers(text: &str) -> Vec<(usize, u64, usize)> {
    let bytes = text.as_bytes();
    let lower = text.to_ascii_lowercase();
    let mut markers = Vec::new();
    let mut search_from = 0;
    while let Some(rel) = lower[search_from..].find("step") {
        let start = search_from + rel;
        search_from = start + 4;
        // Word boundary on the left: start of text or a non-alphanumeric byte.
        if start > 0 {
            let prev = bytes[start - 1] as char;
            if prev.is_ascii_alphanumeric() {
                continue;
            }
        }
        // Skip whitespace between "step" and the index.
        let mut pos = start + 4;
        while pos < bytes.len() && (bytes[pos] as char).is_ascii_whitespace() {
            pos += 1;
        }
        let digits_start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == digits_start {
            continue; // "step" not followed by a number
        }
        let index: u64 = match text[digits_start..pos].parse() {
            Ok(k) => k,
            Err(_) => continue, // overflow-length digit runs are not markers
        };
        markers.push((start, index, pos));
        search_from = pos;
    }
    markers
}

/// Strip the leading separator a step body usually starts with (", " etc.).
fn trim_step_body(s: &str) -> String {
    s.trim_start_matches([',', '.', ':', ';']).trim().to_string()
}

/// Split a rationale into steps on case-insensitive "Step k" markers; when no
/// marker exists the whole text is one step in fallback mode.
pub fn parse_steps(text: &str) -> Result<StepParse> {
    if text.trim().is_empty() {
        return Err(Error::Validation("cannot parse steps of empty text".into()));
    }
    let markers = find_markers(text);
    if markers.is_empty() {
        let body = text.trim().to_string();
        return Ok(StepParse {
            steps: vec![(1, body.clone())],
            final_step: body,
            parse_mode: ParseMode::Fallback,
            non_contiguous: false,
        });
    }
    let mut steps = Vec::with_capacity(markers.len());
    for (i, &(_, index, body_start)) in markers.iter().enumerate() {
        let body_end = markers.get(i + 1).map(|&(next, _, _)| next).unwrap_or(text.len());
        steps.push((index, trim_step_body(&text[body_start..body_end])));
    }
    let non_contiguous = steps
        .iter()
        .enumerate()
        .any(|(i, &(index, _))| index != (i as u64) + 1);
    let final_step = steps.last().expect("at least one marker").1.clone();
    Ok(StepParse { steps, final_step, parse_mode: ParseMode::Marker, non_contiguous })
}

/// Lowercase and collapse whitespace runs to single spaces.
pub fn normalize(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Does the final step contain the target answer in any documented rendering
/// (label, text, or label + text), under case- and whitespace-insensitive
/// substring containment?
pub fn conclusion_pass(final_step: &str, target: &Choice) -> bool {
    let haystack = normalize(final_step);
    [target.label.clone(), target.text.clone(), target.render()]
        .iter()
        .map(|form| normalize(form))
        .filter(|form| !form.is_empty())
        .any(|form| haystack.contains(&form))
}

/// Conclusion filter on a full record: the final step of the rationale must
/// contain the record's target answer.
pub fn conclusion_filter(record: &RationaleRecord, sample: &McSample) -> Result<bool> {
    record.validate_against(sample).map_err(Error::Validation)?;
    let parse = parse_steps(&record.rationale_text)?;
    Ok(conclusion_pass(&parse.final_step, &record.target))
}

/// Word tokenization used by the circularity filter and the toy policy:
/// lowercase, strip non-alphanumeric characters from each word, drop empties.
pub fn tokenize_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(|c| c.to_lowercase())
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Circularity filter: fail iff any word n-gram (contiguous, overlapping
/// occurrences counted) appears strictly more than three times.
pub fn circularity_filter(text: &str, n: usize) -> Result<bool> {
    if n < 1 {
        return Err(Error::Validation("n-gram length must be at least 1".into()));
    }
    let words = tokenize_words(text);
    if words.len() < n {
        return Ok(true);
    }
    let mut counts: BTreeMap<&[String], u32> = BTreeMap::new();
    for window in words.windows(n) {
        let c = counts.entry(window).or_insert(0);
        *c += 1;
        if *c > 3 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Kept/dropped counts from one filtering run. Serialized with exactly these
/// keys in this order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub kept: u64,
    pub dropped_positive_conclusion: u64,
    pub dropped_positive_circularity: u64,
    pub dropped_negative_conclusion: u64,
}

/// Result of `filter_and_pair`: the assembled pairs, the drop statistics, and
/// the input records with their verdicts filled in.
#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub pairs: Vec<PreferencePair>,
    pub stats: FilterStats,
    pub positives: Vec<RationaleRecord>,
    pub negatives: Vec<RationaleRecord>,
}

/// Run both filters and assemble preference pairs.
///
/// A pair is emitted for a sample iff its positive record passes conclusion
/// and circularity and its negative record passes conclusion (negatives skip
/// the circularity check; their verdict is recorded as not-applied). With
/// multiple negatives per sample, each passing negative yields one pair.
/// Pairs are emitted in the order of `samples`.
pub fn filter_and_pair(
    positives: &[RationaleRecord],
    negatives: &[RationaleRecord],
    samples: &[McSample],
    n: usize,
    iteration: u32,
) -> Result<FilterOutcome> {
    let sample_by_id: BTreeMap<&str, &McSample> =
        samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let lookup = |record: &RationaleRecord| -> Result<&McSample> {
        sample_by_id
            .get(record.sample_id.as_str())
            .copied()
            .ok_or_else(|| Error::Validation(format!("record references unknown sample {}", record.sample_id)))
    };

    let mut stats = FilterStats::default();
    let mut positives_out = Vec::with_capacity(positives.len());
    let mut negatives_out = Vec::with_capacity(negatives.len());
    // sample_id -> index of its passing positive, preserving one per sample.
    let mut passing_pos: BTreeMap<String, usize> = BTreeMap::new();
    let mut passing_neg: BTreeMap<String, Vec<usize>> = BTreeMap::new();

    for record in positives {
        if record.polarity != Polarity::Positive {
            return Err(Error::Validation(format!(
                "record for {} in the positive list has negative polarity",
                record.sample_id
            )));
        }
        let sample = lookup(record)?;
        let mut rec = record.clone();
        let concl = conclusion_filter(&rec, sample)?;
        rec.verdicts.conclusion = if concl { Verdict::Pass } else { Verdict::Fail };
        let circ = circularity_filter(&rec.rationale_text, n)?;
        rec.verdicts.circularity = if circ { Verdict::Pass } else { Verdict::Fail };
        if !concl {
            stats.dropped_positive_conclusion += 1;
        } else if !circ {
            stats.dropped_positive_circularity += 1;
        } else if passing_pos.contains_key(&rec.sample_id) {
            return Err(Error::Validation(format!(
                "sample {} has more than one positive record",
                rec.sample_id
            )));
        } else {
            passing_pos.insert(rec.sample_id.clone(), positives_out.len());
        }
        positives_out.push(rec);
    }

    for record in negatives {
        if record.polarity != Polarity::Negative {
            return Err(Error::Validation(format!(
                "record for {} in the negative list has positive polarity",
                record.sample_id
            )));
        }
        let sample = lookup(record)?;
        let mut rec = record.clone();
        let concl = conclusion_filter(&rec, sample)?;
        rec.verdicts.conclusion = if concl { Verdict::Pass } else { Verdict::Fail };
        rec.verdicts.circularity = Verdict::NotApplied;
        if !concl {
            stats.dropped_negative_conclusion += 1;
        } else {
            passing_neg.entry(rec.sample_id.clone()).or_default().push(negatives_out.len());
        }
        negatives_out.push(rec);
    }

    let mut pairs = Vec::new();
    for sample in samples {
        let Some(&pos_idx) = passing_pos.get(&sample.id) else { continue };
        let Some(neg_indices) = passing_neg.get(&sample.id) else { continue };
        let pos = &positives_out[pos_idx];
        for &neg_idx in neg_indices {
            let neg = &negatives_out[neg_idx];
            pairs.push(PreferencePair {
                sample_id: sample.id.clone(),
                image_path: sample.image_path.clone(),
                question: sample.question.clone(),
                choices: sample.choices.clone(),
                chosen: pos.rationale_text.clone(),
                rejected: neg.rationale_text.clone(),
                iteration,
                provenance: PairProvenance {
                    positive: pos.provenance.clone(),
                    negative: neg.provenance.clone(),
                },
            });
            stats.kept += 1;
        }
    }

    Ok(FilterOutcome { pairs, stats, positives: positives_out, negatives: negatives_out })
}
