//! Preference-pair lines: decoding plus the structural validation the reader
//! applies must never panic, and valid pairs must round-trip unchanged.

#![no_main]

use libfuzzer_sys::fuzz_target;

use aot::PreferencePair;

fuzz_target!(|data: &str| {
    let Ok(pair) = serde_json::from_str::<PreferencePair>(data) else { return };
    if pair.validate().is_ok() {
        let line = serde_json::to_string(&pair).expect("valid pair reserializes");
        let back: PreferencePair = serde_json::from_str(&line).expect("own output parses");
        assert_eq!(back, pair, "pair line round-trip drifted");
    }
});
