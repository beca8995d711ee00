//! Description-driven prompt serialization and state-string parsing.
//!
//! Input grammar (single spaces between all parts):
//!
//! ```text
//! 0:<description> 1:<description> 1a) <value> 1b) <value> ... [user] <text> [system] <text> ...
//! ```
//!
//! Categorical slots are followed by their lettered options. Targets name
//! slots by index and pick categorical answers by letter:
//!
//! ```text
//! [states] 0:4 1:1a 3:bangkok city
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dialogue, DialogueState, Schema, Speaker};
use crate::rng::keyed;
use crate::text::canonicalize;

pub const STATES_PREFIX: &str = "[states]";

/// Option letters: a..z, then aa, ab, ...
pub fn option_letter(mut index: usize) -> String {
    let mut out = Vec::new();
    loop {
        out.push(b'a' + (index % 26) as u8);
        if index < 26 {
            break;
        }
        index = index / 26 - 1;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii")
}

pub fn letter_index(letters: &str) -> Option<usize> {
    if letters.is_empty() || !letters.bytes().all(|b| b.is_ascii_lowercase()) {
        return None;
    }
    let mut n: usize = 0;
    for b in letters.bytes() {
        n = n.checked_mul(26)?.checked_add(usize::from(b - b'a') + 1)?;
    }
    Some(n - 1)
}

/// A serialized model input with the maps needed to decode its output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptExample {
    pub input_text: String,
    /// Index → slot name.
    pub slot_index_map: Vec<String>,
    /// Index → categorical options in letter order (empty for open slots).
    pub options: Vec<Vec<String>>,
    pub target_text: Option<String>,
    #[serde(skip)]
    positions: HashMap<String, usize>,
}

impl PromptExample {
    fn new(slot_index_map: Vec<String>, options: Vec<Vec<String>>, input_text: String) -> Self {
        let positions = slot_index_map
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Self {
            input_text,
            slot_index_map,
            options,
            target_text: None,
            positions,
        }
    }

    pub fn index_of(&self, slot: &str) -> Option<usize> {
        self.positions.get(slot).copied()
    }

    pub fn slot_at(&self, index: usize) -> Option<&str> {
        self.slot_index_map.get(index).map(String::as_str)
    }

    /// (index, letter) → value for every categorical option.
    pub fn categorical_letter_map(&self) -> BTreeMap<(usize, String), String> {
        self.options
            .iter()
            .enumerate()
            .flat_map(|(i, vals)| {
                vals.iter()
                    .enumerate()
                    .map(move |(j, v)| ((i, option_letter(j)), v.clone()))
            })
            .collect()
    }
}

/// Builds the model input. Slots get indices in schema order, or in a
/// permutation seeded by `slot_order_seed`.
pub fn build_prompt<S: AsRef<str>>(
    schema: &Schema,
    history: &[(Speaker, S)],
    slot_order_seed: Option<u64>,
) -> PromptExample {
    let mut order: Vec<usize> = (0..schema.len()).collect();
    if let Some(seed) = slot_order_seed {
        order.shuffle(&mut keyed(seed, &["slot-order"]));
    }
    let mut parts: Vec<String> = Vec::new();
    let mut names = Vec::with_capacity(order.len());
    let mut options = Vec::with_capacity(order.len());
    for (index, &pos) in order.iter().enumerate() {
        let slot = &schema.slots()[pos];
        parts.push(format!("{index}:{}", slot.description));
        for (j, v) in slot.values.iter().enumerate() {
            parts.push(format!("{index}{}) {v}", option_letter(j)));
        }
        names.push(slot.name.clone());
        options.push(slot.values.clone());
    }
    for (speaker, text) in history {
        parts.push(format!("[{speaker}]"));
        let text = text.as_ref().trim();
        if !text.is_empty() {
            parts.push(text.to_string());
        }
    }
    PromptExample::new(names, options, parts.join(" "))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TargetError {
    #[error("slot {0:?} is not in the prompt's index map")]
    UnmappedSlot(String),
    #[error("value {value:?} is not an option of categorical slot {slot:?}")]
    NotAnOption { slot: String, value: String },
    #[error("value {value:?} of slot {slot:?} contains a fragment marker and cannot be serialized")]
    Unrepresentable { slot: String, value: String },
}

/// Serializes `state` as a target string. Fragments are in ascending index
/// order, or permuted by `order_seed`.
pub fn build_target(
    state: &DialogueState,
    prompt: &PromptExample,
    order_seed: Option<u64>,
) -> Result<String, TargetError> {
    let mut fragments: Vec<(usize, String)> = Vec::with_capacity(state.len());
    for (slot, value) in state.iter() {
        let index = prompt
            .index_of(slot)
            .ok_or_else(|| TargetError::UnmappedSlot(slot.to_string()))?;
        let opts = &prompt.options[index];
        let answer = if opts.is_empty() {
            if fragment_starts(value).iter().any(|&p| p > 0) {
                return Err(TargetError::Unrepresentable {
                    slot: slot.to_string(),
                    value: value.to_string(),
                });
            }
            value.to_string()
        } else {
            let j = opts
                .iter()
                .position(|o| o == value)
                .ok_or_else(|| TargetError::NotAnOption {
                    slot: slot.to_string(),
                    value: value.to_string(),
                })?;
            format!("{index}{}", option_letter(j))
        };
        fragments.push((index, format!("{index}:{answer}")));
    }
    fragments.sort_by_key(|(i, _)| *i);
    if let Some(seed) = order_seed {
        fragments.shuffle(&mut keyed(seed, &["target-order"]));
    }
    let mut out = STATES_PREFIX.to_string();
    for (_, f) in fragments {
        out.push(' ');
        out.push_str(&f);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParseIssue {
    MissingPrefix,
    Unparseable { fragment: String },
    UnknownIndex { index: String },
    UnknownLetter { index: usize, letters: String },
    InvalidCategorical { index: usize, value: String },
    EmptyValue { index: usize },
    DuplicateIndex { index: usize },
}

impl fmt::Display for ParseIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseIssue::MissingPrefix => write!(f, "missing {STATES_PREFIX} prefix"),
            ParseIssue::Unparseable { fragment } => write!(f, "unparseable fragment {fragment:?}"),
            ParseIssue::UnknownIndex { index } => write!(f, "unknown slot index {index}"),
            ParseIssue::UnknownLetter { index, letters } => {
                write!(f, "slot {index} has no option {letters:?}")
            }
            ParseIssue::InvalidCategorical { index, value } => {
                write!(f, "slot {index} answer {value:?} is neither a letter nor an option")
            }
            ParseIssue::EmptyValue { index } => write!(f, "slot {index} has an empty value"),
            ParseIssue::DuplicateIndex { index } => {
                write!(f, "slot {index} assigned more than once; last value kept")
            }
        }
    }
}

/// Byte offsets where a `<digits>:` fragment starts: at the beginning or
/// right after whitespace.
fn fragment_starts(s: &str) -> Vec<usize> {
    let bytes = s.as_bytes();
    let mut starts = Vec::new();
    for p in 0..bytes.len() {
        if p > 0 && !bytes[p - 1].is_ascii_whitespace() {
            continue;
        }
        let digits = bytes[p..].iter().take_while(|b| b.is_ascii_digit()).count();
        if digits > 0 && bytes.get(p + digits) == Some(&b':') {
            starts.push(p);
        }
    }
    starts
}

/// Decodes a model output string. Never fails; problems are reported as
/// issues and the offending fragments skipped.
pub fn parse_state_string(
    output: &str,
    prompt: &PromptExample,
    schema: &Schema,
) -> (DialogueState, Vec<ParseIssue>) {
    let mut issues = Vec::new();
    let trimmed = output.trim();
    let body = match trimmed.get(..STATES_PREFIX.len()) {
        Some(head) if head.eq_ignore_ascii_case(STATES_PREFIX) => &trimmed[STATES_PREFIX.len()..],
        _ => {
            issues.push(ParseIssue::MissingPrefix);
            trimmed
        }
    };
    let body = body.trim();

    let starts = fragment_starts(body);
    let first = starts.first().copied().unwrap_or(body.len());
    if first > 0 {
        issues.push(ParseIssue::Unparseable {
            fragment: body[..first].trim().to_string(),
        });
    }

    let mut assigned: BTreeMap<usize, String> = BTreeMap::new();
    for (k, &start) in starts.iter().enumerate() {
        let end = starts.get(k + 1).copied().unwrap_or(body.len());
        let fragment = body[start..end].trim();
        let (idx_text, raw_value) = fragment.split_once(':').expect("fragment has a colon");
        let Some(index) = idx_text.parse::<usize>().ok().filter(|&i| i < prompt.slot_index_map.len())
        else {
            issues.push(ParseIssue::UnknownIndex {
                index: idx_text.to_string(),
            });
            continue;
        };
        let value = canonicalize(raw_value);
        if value.is_empty() {
            issues.push(ParseIssue::EmptyValue { index });
            continue;
        }
        let slot = &prompt.slot_index_map[index];
        let categorical = schema
            .get(slot)
            .map_or(!prompt.options[index].is_empty(), |d| d.is_categorical());
        let resolved = if categorical {
            match resolve_option(index, &value, &prompt.options[index]) {
                Ok(v) => v,
                Err(issue) => {
                    issues.push(issue);
                    continue;
                }
            }
        } else {
            value
        };
        if assigned.insert(index, resolved).is_some() {
            issues.push(ParseIssue::DuplicateIndex { index });
        }
    }

    let state = assigned
        .into_iter()
        .map(|(i, v)| (prompt.slot_index_map[i].clone(), v))
        .collect();
    (state, issues)
}

fn resolve_option(index: usize, value: &str, options: &[String]) -> Result<String, ParseIssue> {
    let digits = value.bytes().take_while(u8::is_ascii_digit).count();
    let (num, letters) = value.split_at(digits);
    if digits > 0 && !letters.is_empty() && letters.bytes().all(|b| b.is_ascii_lowercase()) {
        if num.parse::<usize>().ok() != Some(index) {
            return Err(ParseIssue::InvalidCategorical {
                index,
                value: value.to_string(),
            });
        }
        return letter_index(letters)
            .and_then(|j| options.get(j))
            .cloned()
            .ok_or_else(|| ParseIssue::UnknownLetter {
                index,
                letters: letters.to_string(),
            });
    }
    // tolerate the option text itself
    if options.iter().any(|o| o == value) {
        return Ok(value.to_string());
    }
    Err(ParseIssue::InvalidCategorical {
        index,
        value: value.to_string(),
    })
}

/// Per-example seeding for corpus-wide prompt export.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PromptOptions {
    /// Shuffle slot indices per example when set.
    pub slot_order_seed: Option<u64>,
    /// Shuffle target fragments per example when set.
    pub target_order_seed: Option<u64>,
}

fn derive_seed(seed: u64, purpose: &str, dialogue_id: &str, turn: usize) -> u64 {
    keyed(seed, &[purpose, dialogue_id, &turn.to_string()]).next_u64()
}

/// One training or inference example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub input_text: String,
    pub target_text: String,
}

/// Prompt for user turn `turn_index` of `dialogue`, with history drawn
/// from `variant` (falling back to the transcript).
pub fn prompt_for_turn(
    dialogue: &Dialogue,
    turn_index: usize,
    schema: &Schema,
    variant: &str,
    options: PromptOptions,
) -> Option<PromptExample> {
    let pos = dialogue
        .turns
        .iter()
        .enumerate()
        .filter(|(_, t)| t.speaker == Speaker::User)
        .nth(turn_index)?
        .0;
    let history: Vec<(Speaker, &str)> = dialogue.turns[..=pos]
        .iter()
        .map(|t| (t.speaker, t.text_or_transcript(variant)))
        .collect();
    let slot_seed = options
        .slot_order_seed
        .map(|s| derive_seed(s, "slots", &dialogue.id, turn_index));
    Some(build_prompt(schema, &history, slot_seed))
}

/// Builds one record per user turn, targets from the gold states.
pub fn build_examples(
    dialogue: &Dialogue,
    schema: &Schema,
    variant: &str,
    options: PromptOptions,
) -> Result<Vec<TrainingRecord>, TargetError> {
    let mut out = Vec::new();
    for (t, gold) in dialogue.gold_states().iter().enumerate() {
        let mut prompt = prompt_for_turn(dialogue, t, schema, variant, options).expect("turn exists");
        let target_seed = options
            .target_order_seed
            .map(|s| derive_seed(s, "targets", &dialogue.id, t));
        let target = build_target(gold, &prompt, target_seed)?;
        prompt.target_text = Some(target.clone());
        out.push(TrainingRecord {
            dialogue_id: dialogue.id.clone(),
            turn_index: t,
            input_text: prompt.input_text,
            target_text: target,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_schema;

    fn example_schema() -> Schema {
        parse_schema(
            "slot hotel-stars | star rating of the hotel
slot hotel-type | type of the hotel
  value guesthouse
  value hotel
slot hotel-internet | whether the hotel has internet
  value yes
  value no
slot restaurant-name | name of the restaurant
slot restaurant-area | area of the restaurant
",
        )
        .unwrap()
    }

    fn example_state() -> DialogueState {
        [
            ("hotel-stars", "4"),
            ("hotel-type", "guesthouse"),
            ("hotel-internet", "yes"),
            ("restaurant-name", "bangkok city"),
            ("restaurant-area", "centre"),
        ]
        .into_iter()
        .collect()
    }

    #[test]
    fn letters() {
        assert_eq!(option_letter(0), "a");
        assert_eq!(option_letter(25), "z");
        assert_eq!(option_letter(26), "aa");
        assert_eq!(option_letter(27), "ab");
        assert_eq!(option_letter(26 + 26 * 26), "aaa");
        for i in 0..2000 {
            assert_eq!(letter_index(&option_letter(i)), Some(i));
        }
        assert_eq!(letter_index(""), None);
        assert_eq!(letter_index("A"), None);
    }

    #[test]
    fn prompt_grammar() {
        let schema = parse_schema(
            "slot hotel-stars | star rating of the hotel\nslot hotel-type | type of the hotel\n  value guesthouse\n  value hotel\n",
        )
        .unwrap();
        let p = build_prompt(&schema, &[(Speaker::User, "i need a 4-star guesthouse")], None);
        assert_eq!(
            p.input_text,
            "0:star rating of the hotel 1:type of the hotel 1a) guesthouse 1b) hotel [user] i need a 4-star guesthouse"
        );
        assert_eq!(p.slot_index_map, vec!["hotel-stars", "hotel-type"]);
        assert_eq!(p.categorical_letter_map()[&(1, "b".to_string())], "hotel");

        let p = build_prompt(
            &schema,
            &[(Speaker::User, "hello"), (Speaker::System, "hi there")],
            None,
        );
        assert!(p.input_text.ends_with("1b) hotel [user] hello [system] hi there"));

        let single = parse_schema("slot hotel-name | name of the hotel\n").unwrap();
        let p = build_prompt(&single, &[(Speaker::User, "x")], None);
        assert_eq!(p.slot_index_map, vec!["hotel-name"]);
    }

    #[test]
    fn shuffled_prompt_keeps_fragments() {
        let schema = example_schema();
        let plain = build_prompt(&schema, &[(Speaker::User, "x")], None);
        let shuffled = build_prompt(&schema, &[(Speaker::User, "x")], Some(3));
        let mut a = plain.slot_index_map.clone();
        let mut b = shuffled.slot_index_map.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn example_target() {
        let schema = example_schema();
        let p = build_prompt(&schema, &[(Speaker::User, "x")], None);
        assert_eq!(
            build_target(&example_state(), &p, None).unwrap(),
            "[states] 0:4 1:1a 2:2a 3:bangkok city 4:centre"
        );
        assert_eq!(build_target(&DialogueState::new(), &p, None).unwrap(), "[states]");

        let a = build_target(&example_state(), &p, Some(1)).unwrap();
        let b = build_target(&example_state(), &p, Some(2)).unwrap();
        let frags = |s: &str| {
            let (st, _) = parse_state_string(s, &p, &schema);
            st
        };
        assert_eq!(frags(&a), frags(&b));
    }

    #[test]
    fn target_errors() {
        let schema = example_schema();
        let p = build_prompt(&schema, &[(Speaker::User, "x")], None);
        let s: DialogueState = [("hotel-name", "x")].into_iter().collect();
        assert_eq!(build_target(&s, &p, None), Err(TargetError::UnmappedSlot("hotel-name".into())));
        let s: DialogueState = [("hotel-type", "motel")].into_iter().collect();
        assert!(matches!(build_target(&s, &p, None), Err(TargetError::NotAnOption { .. })));
        let s: DialogueState = [("restaurant-name", "the 2:1 cafe")].into_iter().collect();
        assert!(matches!(build_target(&s, &p, None), Err(TargetError::Unrepresentable { .. })));
        let s: DialogueState = [("restaurant-name", "12:30")].into_iter().collect();
        assert!(build_target(&s, &p, None).is_ok());
    }

    #[test]
    fn parse_examples() {
        let schema = example_schema();
        let p = build_prompt(&schema, &[(Speaker::User, "x")], None);
        let (s, issues) = parse_state_string("[states] 0:4 1:1a 3:bangkok city", &p, &schema);
        let expected: DialogueState = [
            ("hotel-stars", "4"),
            ("hotel-type", "guesthouse"),
            ("restaurant-name", "bangkok city"),
        ]
        .into_iter()
        .collect();
        assert_eq!(s, expected);
        assert!(issues.is_empty());

        let (s, issues) = parse_state_string("[states] 9:foo", &p, &schema);
        assert!(s.is_empty());
        assert_eq!(issues, vec![ParseIssue::UnknownIndex { index: "9".into() }]);

        let (s, issues) = parse_state_string("[states] 1:1z", &p, &schema);
        assert!(!s.contains("hotel-type"));
        assert_eq!(issues, vec![ParseIssue::UnknownLetter { index: 1, letters: "z".into() }]);
    }

    #[test]
    fn parse_tolerance() {
        let schema = example_schema();
        let p = build_prompt(&schema, &[(Speaker::User, "x")], None);
        let (s, issues) = parse_state_string("  [STATES]0:4   3:  Bangkok   City ", &p, &schema);
        assert_eq!(s.get("restaurant-name"), Some("bangkok city"));
        assert_eq!(s.get("hotel-stars"), Some("4"));
        assert!(issues.is_empty());

        let (s, issues) = parse_state_string("[states] 0:4 0:5", &p, &schema);
        assert_eq!(s.get("hotel-stars"), Some("5"));
        assert_eq!(issues, vec![ParseIssue::DuplicateIndex { index: 0 }]);

        let (s, issues) = parse_state_string("0:3 junk", &p, &schema);
        assert_eq!(s.get("hotel-stars"), Some("3 junk"));
        assert_eq!(issues, vec![ParseIssue::MissingPrefix]);

        let (s, issues) = parse_state_string("[states] garbage 1:guesthouse 2:3a 4:", &p, &schema);
        assert_eq!(s.get("hotel-type"), Some("guesthouse"));
        assert_eq!(
            issues,
            vec![
                ParseIssue::Unparseable { fragment: "garbage".into() },
                ParseIssue::InvalidCategorical { index: 2, value: "3a".into() },
                ParseIssue::EmptyValue { index: 4 },
            ]
        );

        // times survive: the colon inside a value is not a fragment start
        let train = parse_schema("slot train-leaveat | departure time\n").unwrap();
        let p = build_prompt(&train, &[(Speaker::User, "x")], None);
        let (s, issues) = parse_state_string("[states] 0:17:45", &p, &train);
        assert_eq!(s.get("train-leaveat"), Some("17:45"));
        assert!(issues.is_empty());
    }
}
