//! Scripted-backend fixture lines: strict JSON shape plus the fingerprint
//! well-formedness check, with no panic on any input.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(entry) = aot::gateway::parse_fixture_line(data) {
        assert_eq!(entry.fingerprint.len(), 64);
        assert!(entry.fingerprint.bytes().all(|b| b.is_ascii_hexdigit()));
    }
});
