//! The hand-rolled `key = value` config parser must never panic, whatever
//! bytes arrive; it either produces a validated config or a located error.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = aot::config::parse_config(data, std::path::Path::new("fuzz.cfg"));
});
