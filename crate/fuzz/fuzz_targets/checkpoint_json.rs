//! Checkpoint decoding guards training resume: arbitrary JSON must never
//! panic the loader, and any checkpoint it accepts must survive a
//! save/load cycle with bit-identical parameters.

#![no_main]

use libfuzzer_sys::fuzz_target;

use aot::policy::ToyPolicy;

fuzz_target!(|data: &str| {
    let Ok(policy) = ToyPolicy::from_json_str(data) else { return };
    let json = policy.to_json_string();
    let back = ToyPolicy::from_json_str(&json).expect("own checkpoint output parses");
    let bits = |xs: &[f64]| xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(back.params()), bits(policy.params()), "checkpoint params drifted");
    assert_eq!(back.vocab().tokens(), policy.vocab().tokens());
});
