//! Deterministic builder for the 20-sample mock corpus under
//! `fixtures/run20/`: manifest, images, scripted mock completions keyed by
//! request fingerprint, run configs, and (optionally) the golden artifact
//! hashes for the end-to-end determinism check.
//!
//! The corpus is constructed so the filter outcome is enumerable by hand:
//!   - s03, s11: positive rationale never restates the answer (conclusion drop)
//!   - s05: positive rationale passes conclusion but repeats a 3-gram four
//!     times (circularity drop)
//!   - s08, s11: negative rationale is non-committal (conclusion drop)
//!
//! Every other sample yields one surviving pair per iteration it is pooled
//! in. Scripted evaluation answers are correct for s01–s13, a wrong label
//! for s14–s17, and ambiguous for s18–s20: accuracy is 13/20 = 0.65 at every
//! iteration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use aot::config::load_config;
use aot::dataset::{write_manifest, Choice, McSample, Polarity};
use aot::gateway::{request_fingerprint, FixtureEntry, MockBackend};
use aot::orchestrator::{build_training_requests, run_loop};
use aot::prompt::make_eval_request;
use aot::seed::{derive_seed, request_seed};

/// Master seed the golden runs (and the scripted table) are built for.
const MASTER_SEED: u64 = 7;
/// Seed for the deterministic fixture images.
const IMAGE_SEED: u64 = 1234;
/// Iterations covered by the scripted table.
const MAX_ITERATION: u32 = 3;

const BAD_POSITIVE_CONCLUSION: [&str; 2] = ["s03", "s11"];
const BAD_POSITIVE_CIRCULAR: [&str; 1] = ["s05"];
const BAD_NEGATIVE_CONCLUSION: [&str; 2] = ["s08", "s11"];
/// Samples whose scripted evaluation answer is a wrong label.
const EVAL_WRONG: [&str; 4] = ["s14", "s15", "s16", "s17"];
/// Samples whose scripted evaluation answer is ambiguous.
const EVAL_AMBIGUOUS: [&str; 3] = ["s18", "s19", "s20"];

#[derive(Parser)]
#[command(about = "regenerate the 20-sample mock fixture corpus")]
struct Args {
    /// Output directory for the corpus.
    #[arg(long, default_value = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/run20"))]
    out: PathBuf,
    /// Also run the loop twice and write golden artifact hashes.
    #[arg(long)]
    golden: bool,
}

fn labels() -> [&'static str; 4] {
    ["(A)", "(B)", "(C)", "(D)"]
}

/// The twenty fixture samples. Choice texts are distinct two-digit numbers
/// so no text is a substring of a step index or another choice.
fn build_samples() -> Vec<McSample> {
    (1..=20)
        .map(|i| {
            let id = format!("s{i:02}");
            let texts = [10 + i, 30 + i, 50 + i, 70 + i];
            let choices: Vec<Choice> = labels()
                .iter()
                .zip(texts)
                .map(|(l, t)| Choice::new(*l, t.to_string()))
                .collect();
            let correct = choices[(i - 1) % 4].clone();
            let incorrect: Vec<Choice> =
                choices.iter().filter(|c| **c != correct).cloned().collect();
            McSample {
                id: id.clone(),
                image_path: format!("{id}.png"),
                question: format!("Which number is written on card {i}?"),
                choices,
                correct,
                incorrect,
            }
        })
        .collect()
}

fn write_images(samples: &[McSample], out: &Path) -> anyhow::Result<()> {
    for sample in samples {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(IMAGE_SEED, &["image", &sample.id]));
        let mut img = image::RgbImage::new(16, 16);
        for pixel in img.pixels_mut() {
            *pixel = image::Rgb([rng.random(), rng.random(), rng.random()]);
        }
        let path = out.join(&sample.image_path);
        img.save(&path).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn passing_positive(target: &Choice) -> String {
    format!(
        "Step 1, the card in the image shows a two digit number. \
         Step 2, reading the digits from left to right gives {}. \
         Step 3, the answer is {} {}.",
        target.text, target.label, target.text
    )
}

fn circular_positive(target: &Choice) -> String {
    format!(
        "Step 1, the value repeats the value repeats the value repeats the value \
         repeats across the card. Step 2, the answer is {} {}.",
        target.label, target.text
    )
}

fn bad_positive() -> String {
    "Step 1, the card shows a number. Step 2, the digits are partly occluded. \
     Step 3, the reasoning is complete."
        .to_string()
}

fn passing_negative(target: &Choice) -> String {
    format!(
        "Step 1, the distorted image obscures part of the card. \
         Step 2, the visible strokes still suggest {}. \
         Step 3, the answer is {} {}.",
        target.text, target.label, target.text
    )
}

fn bad_negative() -> String {
    "Step 1, the distorted image is unreadable. Step 2, no definite option emerges."
        .to_string()
}

fn eval_text(sample: &McSample) -> String {
    let id = sample.id.as_str();
    if EVAL_AMBIGUOUS.contains(&id) {
        let a = &sample.choices[0].label;
        let b = &sample.choices[1].label;
        format!("Step 1, comparing the options. Step 2, it is either {a} or {b}.")
    } else if EVAL_WRONG.contains(&id) {
        let wrong = &sample.incorrect[0];
        format!(
            "Step 1, the card is hard to read. Step 2, the answer is {} {}.",
            wrong.label, wrong.text
        )
    } else {
        format!(
            "Step 1, the card is clearly legible. Step 2, the answer is {} {}.",
            sample.correct.label, sample.correct.text
        )
    }
}

fn run_cfg_body() -> &'static str {
    "# 20-sample scripted corpus: two-iteration golden run\n\
     manifest = manifest.jsonl\n\
     run_dir = runs/default\n\
     backend.kind = mock\n\
     backend.fixture = mock.jsonl\n\
     backend.model_id = scripted\n\
     loop.K = 2\n\
     loop.M = 10\n\
     train.lr = 0.01\n\
     train.batch_size = 4\n\
     train.context_slots = 16\n"
}

fn run_m5_cfg_body() -> &'static str {
    "# small pools: two iterations of five samples\n\
     manifest = manifest.jsonl\n\
     run_dir = runs/m5\n\
     backend.kind = mock\n\
     backend.fixture = mock.jsonl\n\
     backend.model_id = scripted\n\
     loop.K = 2\n\
     loop.M = 5\n\
     train.lr = 0.01\n\
     train.batch_size = 4\n\
     train.context_slots = 16\n"
}

fn run_m5_k3_cfg_body() -> &'static str {
    "# early-stop fixture: accuracy is flat, epsilon 0 stops after iteration 2\n\
     manifest = manifest.jsonl\n\
     run_dir = runs/m5k3\n\
     backend.kind = mock\n\
     backend.fixture = mock.jsonl\n\
     backend.model_id = scripted\n\
     loop.K = 3\n\
     loop.M = 5\n\
     loop.early_stop_epsilon = 0.0\n\
     train.lr = 0.01\n\
     train.batch_size = 4\n\
     train.context_slots = 16\n"
}

/// Scripted completion for one training request.
fn training_text(sample_id: &str, polarity: Polarity, target: &Choice) -> String {
    match polarity {
        Polarity::Positive => {
            if BAD_POSITIVE_CONCLUSION.contains(&sample_id) {
                bad_positive()
            } else if BAD_POSITIVE_CIRCULAR.contains(&sample_id) {
                circular_positive(target)
            } else {
                passing_positive(target)
            }
        }
        Polarity::Negative => {
            if BAD_NEGATIVE_CONCLUSION.contains(&sample_id) {
                bad_negative()
            } else {
                passing_negative(target)
            }
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let out = &args.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let samples = build_samples();
    write_images(&samples, out)?;
    write_manifest(&samples, &out.join("manifest.jsonl"))?;
    std::fs::write(out.join("run.cfg"), run_cfg_body())?;
    std::fs::write(out.join("run_m5.cfg"), run_m5_cfg_body())?;
    std::fs::write(out.join("run_m5_k3.cfg"), run_m5_k3_cfg_body())?;

    let config = load_config(&out.join("run.cfg"))?;

    // Script every request the orchestrator can make for iterations 1..=3:
    // positives and the per-iteration negatives, plus the (iteration-
    // independent) evaluation prompts.
    let mut table: BTreeMap<String, String> = BTreeMap::new();
    let mut insert = |fingerprint: String, text: String| -> anyhow::Result<()> {
        if let Some(existing) = table.get(&fingerprint) {
            if *existing != text {
                bail!("fingerprint collision with differing texts: {fingerprint}");
            }
            return Ok(());
        }
        table.insert(fingerprint, text);
        Ok(())
    };

    for iteration in 1..=MAX_ITERATION {
        let requests = build_training_requests(&samples, &config, MASTER_SEED, iteration)?;
        for request in &requests {
            let polarity = request.polarity.expect("training request has polarity");
            let target = request.target.as_ref().expect("training request has target");
            let text = training_text(&request.sample_id, polarity, target);
            insert(request_fingerprint(request), text)?;
        }
    }
    for sample in &samples {
        let request = make_eval_request(
            sample,
            config.decoding,
            request_seed(MASTER_SEED, 1, &sample.id, "eval", 0),
            &config.manifest_dir(),
        )?;
        insert(request_fingerprint(&request), eval_text(sample))?;
    }

    let mut mock_lines = String::new();
    for (fingerprint, text) in &table {
        let entry = FixtureEntry { fingerprint: fingerprint.clone(), text: text.clone() };
        mock_lines.push_str(&serde_json::to_string(&entry)?);
        mock_lines.push('\n');
    }
    std::fs::write(out.join("mock.jsonl"), mock_lines)?;
    println!("wrote {} samples and {} scripted completions to {}", samples.len(), table.len(), out.display());

    if args.golden {
        let backend = MockBackend::from_fixture(&out.join("mock.jsonl"), false)?;
        let artifacts = [
            "records.jsonl",
            "pairs.jsonl",
            "filter_stats.json",
            "train_metrics.jsonl",
            "checkpoint.json",
            "eval_report.jsonl",
        ];
        let mut runs: Vec<BTreeMap<String, Vec<u8>>> = Vec::new();
        for _ in 0..2 {
            let tmp = tempfile::tempdir()?;
            let mut run_config = config.clone();
            run_config.run_dir = tmp.path().join("run");
            let state = run_loop(&samples, &run_config, &backend, MASTER_SEED, |_| {})?;
            let mut bytes = BTreeMap::new();
            for k in 1..=state.completed_iterations() {
                for artifact in artifacts {
                    let rel = format!("iter_{k:03}/{artifact}");
                    let data = std::fs::read(run_config.run_dir.join(&rel))
                        .with_context(|| format!("reading {rel}"))?;
                    bytes.insert(rel, data);
                }
            }
            runs.push(bytes);
        }
        if runs[0] != runs[1] {
            bail!("two identical runs produced differing artifacts");
        }
        let hashes: BTreeMap<&String, String> =
            runs[0].iter().map(|(k, v)| (k, sha256_hex(v))).collect();
        let mut text = serde_json::to_string_pretty(&hashes)?;
        text.push('\n');
        std::fs::write(out.join("golden_hashes.json"), text)?;
        println!("wrote {} golden hashes", hashes.len());
    }

    Ok(())
}
