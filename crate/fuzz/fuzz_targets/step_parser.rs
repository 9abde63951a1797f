//! The step-marker scanner and both text filters run on raw model output;
//! none of them may panic, and the parse must keep its shape invariants.

#![no_main]

use libfuzzer_sys::fuzz_target;

use aot::filters::{circularity_filter, parse_steps, tokenize_words};

fuzz_target!(|data: &str| {
    if let Ok(parse) = parse_steps(data) {
        assert!(!parse.steps.is_empty(), "a successful parse has at least one step");
        assert_eq!(
            &parse.final_step,
            &parse.steps.last().unwrap().1,
            "final_step must be the last step's text"
        );
    }
    for n in 1..=4 {
        let _ = circularity_filter(data, n);
    }
    let _ = tokenize_words(data);
});
