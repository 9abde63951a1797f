//! Answer extraction reads raw completions against arbitrary choice lists;
//! it must never panic, and any extracted answer must be one of the
//! candidates it was given.

#![no_main]

use libfuzzer_sys::fuzz_target;

use aot::dataset::Choice;
use aot::eval::extract_answer;

fuzz_target!(|input: (String, Vec<(String, String)>)| {
    let (text, raw_choices) = input;
    let choices: Vec<Choice> =
        raw_choices.into_iter().take(8).map(|(label, body)| Choice::new(label, body)).collect();
    let (found, _mode) = extract_answer(&text, &choices);
    if let Some(choice) = found {
        assert!(
            choices.iter().any(|c| std::ptr::eq(c, choice)),
            "extraction returned a choice outside the candidate list"
        );
    }
});
