mod common;

use common::fixture;
use dstkit_core::corpus::{load_corpus, load_schema, DialogueState, TurnRangeError};
use dstkit_core::d3st::{build_target, parse_state_string, prompt_for_turn, PromptOptions};

fn example() -> (dstkit_core::Schema, dstkit_core::Dialogue) {
    let schema = load_schema(fixture("schema.txt")).unwrap();
    let mut corpus = load_corpus(fixture("hotel_example.corpus"), &schema).unwrap();
    assert_eq!(corpus.len(), 1);
    (schema, corpus.remove(0))
}

fn state(pairs: &[(&str, &str)]) -> DialogueState {
    pairs.iter().copied().collect()
}

#[test]
fn example_has_five_user_turns_and_cumulative_states() {
    let (_, d) = example();
    assert_eq!(d.user_turn_count(), 5);
    assert!(d.check_cumulative().is_empty());
    let states = d.gold_states();
    assert_eq!(states.iter().map(DialogueState::len).collect::<Vec<_>>(), vec![2, 3, 3, 4, 5]);
    assert_eq!(
        states[4],
        state(&[
            ("hotel-stars", "4"),
            ("hotel-type", "guesthouse"),
            ("hotel-internet", "yes"),
            ("restaurant-name", "bangkok city"),
            ("restaurant-area", "centre"),
        ])
    );
}

#[test]
fn state_lookup_by_user_turn() {
    let (_, d) = example();
    assert_eq!(d.state_at_turn(0).unwrap(), &state(&[("hotel-stars", "4"), ("hotel-type", "guesthouse")]));
    assert_eq!(d.state_at_turn(9), Err(TurnRangeError { index: 9, count: 5 }));
}

#[test]
fn final_turn_target_string() {
    let (schema, d) = example();
    let prompt = prompt_for_turn(&d, 4, &schema, "transcript", PromptOptions::default()).unwrap();
    assert!(prompt.input_text.starts_with("0:"));
    assert!(prompt.input_text.contains("1a) guesthouse 1b) hotel"));
    assert!(prompt.input_text.contains("[user] all i needed today was the address, thank you"));
    let target = build_target(d.state_at_turn(4).unwrap(), &prompt, None).unwrap();
    assert_eq!(target, "[states] 0:4 1:1a 2:2a 3:bangkok city 4:centre");
    let (parsed, issues) = parse_state_string(&target, &prompt, &schema);
    assert!(issues.is_empty());
    assert_eq!(&parsed, d.state_at_turn(4).unwrap());
}

#[test]
fn history_alternates_speakers() {
    let (schema, d) = example();
    let prompt = prompt_for_turn(&d, 2, &schema, "transcript", PromptOptions::default()).unwrap();
    let markers: Vec<&str> = prompt
        .input_text
        .split(' ')
        .filter(|w| *w == "[user]" || *w == "[system]")
        .collect();
    assert_eq!(markers, ["[user]", "[system]", "[user]", "[system]", "[user]"]);
}
