//! Rationale-record lines: decode anything without panicking; accepted
//! records round-trip bit-exactly (floats included — resume depends on it).

#![no_main]

use libfuzzer_sys::fuzz_target;

use aot::RationaleRecord;

fuzz_target!(|data: &str| {
    let Ok(record) = serde_json::from_str::<RationaleRecord>(data) else { return };
    let line = serde_json::to_string(&record).expect("parsed record reserializes");
    let back: RationaleRecord = serde_json::from_str(&line).expect("own output parses");
    // f64 fields compare by bits via PartialEq except NaN, which JSON cannot
    // produce in the first place.
    assert_eq!(back, record, "record line round-trip drifted");
});
