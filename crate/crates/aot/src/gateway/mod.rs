//! Backend dispatch: sends generation requests to a chat-completions-style
//! remote server or a deterministic scripted mock, with request
//! fingerprinting, bounded-parallel batching that preserves input order, and
//! retry with exponential backoff.

mod mock;
mod remote;

pub use mock::{parse_fixture_line, FixtureEntry, MockBackend};
pub use remote::{RemoteBackend, API_KEY_ENV};

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::prompt::{DecodingParams, GenerationRequest};
use crate::Result;

/// Which backend implementation a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    Mock,
}

/// Retry behavior for transient failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, backoff_base_ms: 500 }
    }
}

/// Connection settings for a backend.
#[derive(Debug, Clone)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: String,
    pub model_id: String,
    pub max_parallel: usize,
    pub timeout_ms: u64,
    pub retry: RetryPolicy,
    /// Mock only: path to the scripted fixture file.
    pub fixture: Option<std::path::PathBuf>,
    /// Mock only: synthesize an answer when a fingerprint is not scripted.
    pub mock_default: bool,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            endpoint: String::new(),
            model_id: "toy".into(),
            max_parallel: 8,
            timeout_ms: 30_000,
            retry: RetryPolicy::default(),
            fixture: None,
            mock_default: false,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_parallel < 1 {
            return Err(Error::Validation("backend.max_parallel must be at least 1".into()));
        }
        if self.retry.max_attempts < 1 {
            return Err(Error::Validation("backend.retry.max_attempts must be at least 1".into()));
        }
        if self.kind == BackendKind::Remote && self.endpoint.is_empty() {
            return Err(Error::Validation("remote backend requires backend.endpoint".into()));
        }
        Ok(())
    }
}

/// What a backend sees for one request: exactly the wire-level content.
#[derive(Debug, Clone)]
pub struct WireRequest<'a> {
    pub model: &'a str,
    pub prompt_text: &'a str,
    pub image_png: &'a [u8],
    pub decoding: DecodingParams,
}

/// A pluggable inference backend. `generate_once` performs a single attempt;
/// retries are handled by the gateway.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn generate_once(&self, request: &WireRequest<'_>) -> Result<String>;
}

/// One successful generation.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub fingerprint: String,
    pub text: String,
    pub latency_ms: u64,
    pub attempts: u32,
}

/// Stable content hash over (prompt text, image bytes, decoding parameters).
/// Identical requests share fingerprints across runs and machines.
pub fn fingerprint(prompt_text: &str, image_png: &[u8], decoding: &DecodingParams) -> String {
    let mut hasher = Sha256::new();
    hasher.update((prompt_text.len() as u64).to_le_bytes());
    hasher.update(prompt_text.as_bytes());
    hasher.update((image_png.len() as u64).to_le_bytes());
    hasher.update(image_png);
    hasher.update(decoding.temperature.to_bits().to_le_bytes());
    hasher.update(decoding.top_p.to_bits().to_le_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Fingerprint of a full generation request.
pub fn request_fingerprint(request: &GenerationRequest) -> String {
    fingerprint(&request.prompt_text, &request.image_png, &request.decoding)
}

fn is_retryable(error: &Error) -> bool {
    match error {
        Error::Transport { .. } => true,
        // Server-side failures are worth retrying; client errors are not.
        Error::Protocol { status, .. } => *status >= 500,
        _ => false,
    }
}

/// Send one request, retrying transient failures with exponential backoff.
/// Empty completions are an error (the record is dropped and counted by the
/// caller), never retried.
pub fn generate(
    request: &GenerationRequest,
    backend: &dyn Backend,
    model_id: &str,
    retry: &RetryPolicy,
) -> Result<GenerationResult> {
    let fp = request_fingerprint(request);
    let wire = WireRequest {
        model: model_id,
        prompt_text: &request.prompt_text,
        image_png: &request.image_png,
        decoding: request.decoding,
    };
    let started = Instant::now();
    let mut attempt = 0;
    loop {
        attempt += 1;
        match backend.generate_once(&wire) {
            Ok(text) => {
                if text.trim().is_empty() {
                    return Err(Error::EmptyOutput { fingerprint: fp });
                }
                return Ok(GenerationResult {
                    fingerprint: fp,
                    text,
                    latency_ms: started.elapsed().as_millis() as u64,
                    attempts: attempt,
                });
            }
            Err(e) if is_retryable(&e) && attempt < retry.max_attempts => {
                let backoff = retry.backoff_base_ms.saturating_mul(1 << (attempt - 1));
                std::thread::sleep(Duration::from_millis(backoff));
            }
            Err(Error::Transport { msg, .. }) => {
                return Err(Error::Transport { fingerprint: Some(fp), msg });
            }
            Err(e) => return Err(e),
        }
    }
}

/// Send a batch with at most `max_parallel` requests in flight. Results come
/// back in request order regardless of completion order; per-request errors
/// are collected, not fail-fast.
pub fn generate_batch(
    requests: &[GenerationRequest],
    backend: &dyn Backend,
    model_id: &str,
    retry: &RetryPolicy,
    max_parallel: usize,
) -> Vec<Result<GenerationResult>> {
    if requests.is_empty() {
        return Vec::new();
    }
    let workers = max_parallel.max(1).min(requests.len());
    if workers == 1 {
        return requests.iter().map(|r| generate(r, backend, model_id, retry)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<GenerationResult>>>> =
        requests.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= requests.len() {
                    break;
                }
                let result = generate(&requests[i], backend, model_id, retry);
                *slots[i].lock().expect("result slot poisoned") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("result slot poisoned").expect("worker filled slot"))
        .collect()
}

/// Counts of how a batch went, for stage summaries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BatchSummary {
    pub succeeded: usize,
    pub empty_output: usize,
    pub failed_transport: usize,
}

/// Summarize batch outcomes by class.
pub fn summarize(results: &[Result<GenerationResult>]) -> BatchSummary {
    let mut summary = BatchSummary::default();
    for r in results {
        match r {
            Ok(_) => summary.succeeded += 1,
            Err(e) if e.is_transport() => summary.failed_transport += 1,
            Err(_) => summary.empty_output += 1,
        }
    }
    summary
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PromptKind;
    use std::sync::atomic::AtomicI64;

    fn request(prompt: &str, image: &[u8]) -> GenerationRequest {
        GenerationRequest {
            sample_id: "s1".into(),
            prompt_kind: PromptKind::AoT,
            prompt_text: prompt.into(),
            image_png: image.to_vec(),
            decoding: DecodingParams::default(),
            polarity: None,
            target: None,
            rng_seed: 0,
            augmentation: None,
        }
    }

    #[test]
    fn fingerprints_are_stable_and_sensitive() {
        let a = request("prompt one", b"img");
        assert_eq!(request_fingerprint(&a), request_fingerprint(&a));
        assert_eq!(request_fingerprint(&a).len(), 64);
        let b = request("prompt one!", b"img");
        assert_ne!(request_fingerprint(&a), request_fingerprint(&b));
        let c = request("prompt one", b"img2");
        assert_ne!(request_fingerprint(&a), request_fingerprint(&c));
        let mut d = request("prompt one", b"img");
        d.decoding.temperature = 0.71;
        assert_ne!(request_fingerprint(&a), request_fingerprint(&d));
    }

    #[test]
    fn fingerprint_framing_prevents_boundary_shifts() {
        // Moving bytes between prompt and image must change the hash.
        let a = fingerprint("ab", b"c", &DecodingParams::default());
        let b = fingerprint("a", b"bc", &DecodingParams::default());
        assert_ne!(a, b);
    }

    /// Backend that fails with a transport error a scripted number of times.
    struct Flaky {
        failures: AtomicUsize,
    }

    impl Backend for Flaky {
        fn id(&self) -> &str {
            "flaky"
        }
        fn generate_once(&self, _request: &WireRequest<'_>) -> Result<String> {
            if self.failures.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |f| {
                if f > 0 {
                    Some(f - 1)
                } else {
                    None
                }
            }).is_ok()
            {
                Err(Error::Transport { fingerprint: None, msg: "scripted failure".into() })
            } else {
                Ok("Step 1, fine.".into())
            }
        }
    }

    #[test]
    fn transient_failures_are_retried_with_attempt_count() {
        let backend = Flaky { failures: AtomicUsize::new(2) };
        let retry = RetryPolicy { max_attempts: 3, backoff_base_ms: 1 };
        let result = generate(&request("p", b"i"), &backend, "m", &retry).unwrap();
        assert_eq!(result.attempts, 3);
        assert_eq!(result.text, "Step 1, fine.");
    }

    #[test]
    fn exhausted_retries_return_transport_with_fingerprint() {
        let backend = Flaky { failures: AtomicUsize::new(10) };
        let retry = RetryPolicy { max_attempts: 2, backoff_base_ms: 1 };
        let req = request("p", b"i");
        let err = generate(&req, &backend, "m", &retry).unwrap_err();
        match err {
            Error::Transport { fingerprint: Some(fp), .. } => {
                assert_eq!(fp, request_fingerprint(&req));
            }
            other => panic!("expected transport error, got {other:?}"),
        }
    }

    /// Backend that records peak concurrency and answers with the request
    /// index parsed from the prompt.
    struct Counting {
        in_flight: AtomicI64,
        peak: AtomicI64,
    }

    impl Backend for Counting {
        fn id(&self) -> &str {
            "counting"
        }
        fn generate_once(&self, request: &WireRequest<'_>) -> Result<String> {
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(5));
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            Ok(format!("echo {}", request.prompt_text))
        }
    }

    #[test]
    fn batch_preserves_order_and_bounds_parallelism() {
        let requests: Vec<GenerationRequest> =
            (0..12).map(|i| request(&format!("req {i}"), b"img")).collect();
        let backend = Counting { in_flight: AtomicI64::new(0), peak: AtomicI64::new(0) };
        let retry = RetryPolicy { max_attempts: 1, backoff_base_ms: 1 };
        let results = generate_batch(&requests, &backend, "m", &retry, 4);
        assert_eq!(results.len(), 12);
        for (i, r) in results.iter().enumerate() {
            assert_eq!(r.as_ref().unwrap().text, format!("echo req {i}"));
        }
        let peak = backend.peak.load(Ordering::SeqCst);
        assert!(peak <= 4, "peak concurrency {peak} exceeded max_parallel");
        assert!(peak >= 2, "expected some actual parallelism, saw {peak}");
    }

    #[test]
    fn sequential_batch_never_overlaps() {
        let requests: Vec<GenerationRequest> =
            (0..6).map(|i| request(&format!("req {i}"), b"img")).collect();
        let backend = Counting { in_flight: AtomicI64::new(0), peak: AtomicI64::new(0) };
        let retry = RetryPolicy { max_attempts: 1, backoff_base_ms: 1 };
        let results = generate_batch(&requests, &backend, "m", &retry, 1);
        assert!(results.iter().all(|r| r.is_ok()));
        assert_eq!(backend.peak.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn empty_batch_is_empty() {
        let backend = Counting { in_flight: AtomicI64::new(0), peak: AtomicI64::new(0) };
        let retry = RetryPolicy::default();
        assert!(generate_batch(&[], &backend, "m", &retry, 4).is_empty());
    }

    /// Backend that always returns whitespace.
    struct Blank;
    impl Backend for Blank {
        fn id(&self) -> &str {
            "blank"
        }
        fn generate_once(&self, _request: &WireRequest<'_>) -> Result<String> {
            Ok("   ".into())
        }
    }

    #[test]
    fn blank_completion_is_an_empty_output_error_not_retried() {
        let retry = RetryPolicy { max_attempts: 3, backoff_base_ms: 1 };
        let err = generate(&request("p", b"i"), &Blank, "m", &retry).unwrap_err();
        assert!(matches!(err, Error::EmptyOutput { .. }));
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn summary_counts_by_class() {
        let ok = Ok(GenerationResult {
            fingerprint: "f".into(),
            text: "t".into(),
            latency_ms: 0,
            attempts: 1,
        });
        let empty = Err(Error::EmptyOutput { fingerprint: "f".into() });
        let transport = Err(Error::Transport { fingerprint: None, msg: "x".into() });
        let summary = summarize(&[ok, empty, transport]);
        assert_eq!(
            summary,
            BatchSummary { succeeded: 1, empty_output: 1, failed_transport: 1 }
        );
    }
}
