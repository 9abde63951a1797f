//! Manifest lines are attacker-adjacent input (hand-edited datasets); the
//! decoder must never panic, and anything it accepts as valid must survive
//! the line format unchanged.

#![no_main]

use libfuzzer_sys::fuzz_target;

use aot::McSample;

fuzz_target!(|data: &str| {
    let Ok(sample) = serde_json::from_str::<McSample>(data) else { return };
    if sample.validate().is_ok() {
        let line = serde_json::to_string(&sample).expect("valid sample reserializes");
        let back: McSample = serde_json::from_str(&line).expect("own output parses");
        assert_eq!(back, sample, "manifest line round-trip drifted");
    }
});
