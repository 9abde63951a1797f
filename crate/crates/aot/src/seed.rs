//! Deterministic seed derivation: every stage of the pipeline draws its
//! randomness from a sub-seed derived by hashing the master seed together
//! with a list of name parts, so stages never share RNG streams and runs
//! reproduce bit-for-bit.

use sha2::{Digest, Sha256};

/// Derive a sub-seed from `base` and a path of name parts.
///
/// Each part is length-prefixed before hashing so that part boundaries are
/// unambiguous (`["ab","c"]` never collides with `["a","bc"]`).
pub fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has at least 8 bytes"))
}

/// Sub-seed for the generation request of one sample in one iteration.
///
/// `index` distinguishes multiple requests of the same polarity for the same
/// sample (used when more than one negative per sample is configured).
pub fn request_seed(master: u64, iteration: u32, sample_id: &str, polarity: &str, index: u32) -> u64 {
    derive_seed(
        master,
        &[
            "request",
            &iteration.to_string(),
            sample_id,
            polarity,
            &index.to_string(),
        ],
    )
}
