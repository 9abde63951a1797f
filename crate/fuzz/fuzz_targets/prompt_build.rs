//! Prompt construction from arbitrary question/choice text: no panic, and
//! the single-substitution guarantee means the question text appears in the
//! output verbatim — even when it contains literal slot names.

#![no_main]

use libfuzzer_sys::fuzz_target;

use aot::dataset::Choice;
use aot::prompt::{build_aot_prompt, build_naive_prompt};

fuzz_target!(|input: (String, Vec<(String, String)>, usize)| {
    let (question, raw_choices, pick) = input;
    let choices: Vec<Choice> =
        raw_choices.into_iter().take(6).map(|(label, body)| Choice::new(label, body)).collect();

    if let Ok(prompt) = build_naive_prompt(&question, &choices) {
        assert!(prompt.contains(&question), "question text must survive substitution");
    }
    if !choices.is_empty() {
        let answer = choices[pick % choices.len()].clone();
        if let Ok(prompt) = build_aot_prompt(&question, &choices, &answer) {
            assert!(prompt.contains(&question), "question text must survive substitution");
            assert!(prompt.contains(&answer.render()), "answer must be quoted in the prompt");
        }
    }
});
