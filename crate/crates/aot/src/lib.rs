//! Answer-oriented rationale pipeline: build prompts that ask a backend to
//! justify a given (correct or deliberately wrong) answer to a multiple-choice
//! visual question, filter the generated rationales for quality, assemble
//! preference pairs, and run desk-scale direct preference optimization on a
//! toy bigram policy with exact, testable numerics.
//!
//! The pipeline is deterministic end to end: every random decision flows from
//! a single master seed through named sub-seeds, and the scripted mock backend
//! makes full runs byte-reproducible.

pub mod augment;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod dpo;
pub mod error;
pub mod eval;
pub mod filters;
pub mod gateway;
pub mod orchestrator;
pub mod policy;
pub mod prompt;
pub mod seed;

pub use dataset::{Choice, McSample, Polarity, PreferencePair, RationaleRecord};
pub use error::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
