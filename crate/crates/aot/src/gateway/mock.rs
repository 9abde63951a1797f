//! Scripted offline backend: answers requests from a fingerprint-keyed
//! fixture table, optionally synthesizing a plausible completion for
//! unscripted fingerprints so smoke runs need no fixture authoring.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::gateway::{fingerprint, Backend, WireRequest};
use crate::Result;

/// One scripted completion: `{"fingerprint": "<hex>", "text": "<completion>"}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureEntry {
    pub fingerprint: String,
    pub text: String,
}

/// Parse one fixture line: the strict JSON shape plus a well-formed sha-256
/// hex fingerprint. The error is the bare message; callers add the location.
pub fn parse_fixture_line(line: &str) -> std::result::Result<FixtureEntry, String> {
    let entry: FixtureEntry = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if entry.fingerprint.len() != 64
        || !entry.fingerprint.bytes().all(|b| b.is_ascii_hexdigit())
    {
        return Err(format!("not a sha-256 hex fingerprint: {:?}", entry.fingerprint));
    }
    Ok(entry)
}

/// Deterministic mock backend keyed by request fingerprint.
#[derive(Debug)]
pub struct MockBackend {
    table: HashMap<String, String>,
    synthesize_default: bool,
}

/// The prompt fragment that precedes the quoted answer in rationale prompts.
const ANSWER_LEAD: &str = "The correct answer to the question is \"";

impl MockBackend {
    pub fn new(synthesize_default: bool) -> Self {
        MockBackend { table: HashMap::new(), synthesize_default }
    }

    /// Load fixture entries from a JSONL file. Later entries for the same
    /// fingerprint override earlier ones.
    pub fn from_fixture(path: &Path, synthesize_default: bool) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut table = HashMap::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| Error::Io {
                path: path.display().to_string(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let entry = parse_fixture_line(&line).map_err(|msg| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg,
            })?;
            table.insert(entry.fingerprint, entry.text);
        }
        Ok(MockBackend { table, synthesize_default })
    }

    pub fn insert(&mut self, fingerprint: String, text: String) {
        self.table.insert(fingerprint, text);
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Build a completion for an unscripted prompt. Rationale prompts quote
    /// their target answer, so the synthesized text restates it in the final
    /// step; anything else gets a generic two-step answer.
    fn synthesize(prompt_text: &str) -> String {
        if let Some(rest) = prompt_text.split(ANSWER_LEAD).nth(1) {
            if let Some(answer) = rest.split("\".").next() {
                return format!(
                    "Step 1, the image shows the relevant detail clearly. \
                     Step 2, that detail matches option {answer}. \
                     Step 3, the answer is {answer}."
                );
            }
        }
        "Step 1, examine the image. Step 2, the most consistent option is (A).".into()
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    fn generate_once(&self, request: &WireRequest<'_>) -> Result<String> {
        let fp = fingerprint(request.prompt_text, request.image_png, &request.decoding);
        if let Some(text) = self.table.get(&fp) {
            return Ok(text.clone());
        }
        if self.synthesize_default {
            return Ok(Self::synthesize(request.prompt_text));
        }
        Err(Error::EmptyOutput { fingerprint: fp })
    }
}
