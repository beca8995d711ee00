//! Slot-value substitution augmentation.
//!
//! Each augmented copy of a dialogue swaps the open-slot values that are
//! spoken verbatim in its utterances for other values from a pool, and
//! rewrites every text variant and every state consistently. Matching is
//! word-bounded on canonical text. When values overlap, longer values claim
//! their spans first and shorter ones only take what is left.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::{Dialogue, Schema};
use crate::postproc::NounDatabase;
use crate::rng::keyed;
use crate::text::find_word_bounded;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AugmentError {
    #[error("augmentation factor must be at least 1")]
    ZeroFactor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Substitution {
    pub slots: Vec<String>,
    pub old: String,
    pub new: String,
}

/// A substitutable value left alone because its pool had no usable entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Skipped {
    pub dialogue: String,
    pub slots: Vec<String>,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedDialogue {
    pub dialogue: Dialogue,
    pub substitutions: Vec<Substitution>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Augmentation {
    /// `factor` variants; index 0 is the original.
    pub variants: Vec<AugmentedDialogue>,
    pub skipped: Vec<Skipped>,
}

impl Augmentation {
    pub fn dialogues(&self) -> impl Iterator<Item = &Dialogue> {
        self.variants.iter().map(|v| &v.dialogue)
    }
}

pub fn variant_id(id: &str, k: usize) -> String {
    if k == 0 {
        id.to_string()
    } else {
        format!("{id}#aug{k}")
    }
}

fn all_texts(d: &Dialogue) -> impl Iterator<Item = &str> {
    d.turns.iter().flat_map(|t| t.texts.values().map(String::as_str))
}

/// Distinct open-slot values that occur verbatim in some utterance, grouped
/// by value string: value → slots carrying it.
fn substitutable(d: &Dialogue, schema: &Schema) -> BTreeMap<String, BTreeSet<String>> {
    let mut groups: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for state in d.turns.iter().filter_map(|t| t.state.as_ref()) {
        for (slot, value) in state.iter() {
            let open = schema.get(slot).is_some_and(|s| !s.is_categorical());
            if !open || value == "dontcare" {
                continue;
            }
            if all_texts(d).any(|t| !find_word_bounded(t, value).is_empty()) {
                groups.entry(value.to_string()).or_default().insert(slot.to_string());
            }
        }
    }
    groups
}

/// Non-overlapping replacement spans over `text`, longer values first.
fn plan_spans(text: &str, olds: &[&str]) -> Vec<(usize, usize, usize)> {
    let mut taken: Vec<(usize, usize, usize)> = Vec::new();
    for (gi, old) in olds.iter().enumerate() {
        for start in find_word_bounded(text, old) {
            let end = start + old.len();
            if taken.iter().all(|&(s, e, _)| end <= s || start >= e) {
                taken.push((start, end, gi));
            }
        }
    }
    taken.sort_unstable();
    taken
}

fn apply_spans(text: &str, spans: &[(usize, usize, usize)], news: &[String]) -> String {
    let mut out = String::with_capacity(text.len());
    let mut at = 0;
    for &(s, e, gi) in spans {
        out.push_str(&text[at..s]);
        out.push_str(&news[gi]);
        at = e;
    }
    out.push_str(&text[at..]);
    out
}

/// Produces `factor` variants of `dialogue` (the first is the original).
pub fn augment_dialogue(
    dialogue: &Dialogue,
    schema: &Schema,
    pool: &NounDatabase,
    factor: usize,
    seed: u64,
) -> Result<Augmentation, AugmentError> {
    if factor == 0 {
        return Err(AugmentError::ZeroFactor);
    }
    let state_values: BTreeSet<&str> = dialogue
        .turns
        .iter()
        .filter_map(|t| t.state.as_ref())
        .flat_map(|s| s.iter().map(|(_, v)| v))
        .collect();

    // Replacement candidates per value group; the pool of the first slot
    // (schema order) with usable entries serves the whole group.
    let mut groups: Vec<(String, Vec<String>, Vec<&String>)> = Vec::new();
    let mut skipped = Vec::new();
    for (old, slots) in substitutable(dialogue, schema) {
        let mut slots: Vec<String> = slots.into_iter().collect();
        slots.sort_by_key(|s| schema.position(s));
        let candidates = slots.iter().find_map(|s| {
            let c: Vec<&String> = pool
                .values(s)?
                .iter()
                .filter(|v| !state_values.contains(v.as_str()))
                .collect();
            (!c.is_empty()).then_some(c)
        });
        match candidates {
            Some(c) => groups.push((old, slots, c)),
            None => skipped.push(Skipped {
                dialogue: dialogue.id.clone(),
                slots,
                value: old,
            }),
        }
    }
    groups.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));

    // Span plans do not depend on the chosen replacements, so compute them
    // once and drop groups whose every occurrence is shadowed.
    let olds: Vec<&str> = groups.iter().map(|g| g.0.as_str()).collect();
    let plans: Vec<Vec<Vec<(usize, usize, usize)>>> = dialogue
        .turns
        .iter()
        .map(|t| t.texts.values().map(|text| plan_spans(text, &olds)).collect())
        .collect();
    let mut used = vec![false; groups.len()];
    for &(_, _, gi) in plans.iter().flatten().flatten() {
        used[gi] = true;
    }

    let mut variants = Vec::with_capacity(factor);
    variants.push(AugmentedDialogue {
        dialogue: dialogue.clone(),
        substitutions: Vec::new(),
    });
    for k in 1..factor {
        let k_str = k.to_string();
        let news: Vec<String> = groups
            .iter()
            .map(|(old, _, cands)| {
                let mut rng = keyed(seed, &[&dialogue.id, &k_str, old]);
                cands[rng.random_range(0..cands.len())].clone()
            })
            .collect();
        let mut d = dialogue.clone();
        d.id = variant_id(&dialogue.id, k);
        for (turn, turn_plans) in d.turns.iter_mut().zip(&plans) {
            for (text, spans) in turn.texts.values_mut().zip(turn_plans) {
                if !spans.is_empty() {
                    *text = apply_spans(text, spans, &news);
                }
            }
            if let Some(state) = turn.state.as_mut() {
                let updates: Vec<(String, String)> = state
                    .iter()
                    .filter_map(|(slot, value)| {
                        groups.iter().zip(&news).zip(&used).find_map(|(((old, slots, _), new), &u)| {
                            (u && old == value && slots.iter().any(|s| s == slot))
                                .then(|| (slot.to_string(), new.clone()))
                        })
                    })
                    .collect();
                for (slot, new) in updates {
                    state.set(slot, &new);
                }
            }
        }
        let substitutions = groups
            .iter()
            .zip(&news)
            .zip(&used)
            .filter(|(_, &u)| u)
            .map(|(((old, slots, _), new), _)| Substitution {
                slots: slots.clone(),
                old: old.clone(),
                new: new.clone(),
            })
            .collect();
        variants.push(AugmentedDialogue { dialogue: d, substitutions });
    }
    Ok(Augmentation { variants, skipped })
}

/// Augments every dialogue; output is grouped per source dialogue in input order.
pub fn augment_corpus(
    corpus: &[Dialogue],
    schema: &Schema,
    pool: &NounDatabase,
    factor: usize,
    seed: u64,
) -> Result<Vec<Augmentation>, AugmentError> {
    corpus
        .par_iter()
        .map(|d| augment_dialogue(d, schema, pool, factor, seed))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConsistencyViolation {
    pub dialogue: String,
    pub message: String,
}

/// Checks one augmented variant against its source dialogue.
pub fn check_consistency(original: &Dialogue, variant: &AugmentedDialogue) -> Vec<ConsistencyViolation> {
    let d = &variant.dialogue;
    let mut out = Vec::new();
    let mut flag = |message: String| {
        out.push(ConsistencyViolation {
            dialogue: d.id.clone(),
            message,
        })
    };
    if d.turns.len() != original.turns.len() {
        flag(format!("turn count {} != {}", d.turns.len(), original.turns.len()));
        return out;
    }
    for (i, (a, b)) in original.turns.iter().zip(&d.turns).enumerate() {
        if a.speaker != b.speaker {
            flag(format!("turn {i}: speaker changed"));
        }
        let ka: Vec<_> = a.state.iter().flat_map(|s| s.keys()).collect();
        let kb: Vec<_> = b.state.iter().flat_map(|s| s.keys()).collect();
        if ka != kb {
            flag(format!("turn {i}: state keys changed"));
        }
        if a.texts.keys().ne(b.texts.keys()) {
            flag(format!("turn {i}: variant names changed"));
        }
    }
    for sub in &variant.substitutions {
        for (i, turn) in d.turns.iter().enumerate() {
            if let Some(state) = &turn.state {
                for slot in &sub.slots {
                    if state.get(slot) == Some(sub.old.as_str()) {
                        flag(format!("turn {i}: {slot} still holds {:?}", sub.old));
                    }
                }
            }
        }
        let old_spoken = all_texts(original).any(|t| !find_word_bounded(t, &sub.old).is_empty());
        let new_spoken = all_texts(d).any(|t| !find_word_bounded(t, &sub.new).is_empty());
        if old_spoken != new_spoken {
            flag(format!(
                "{:?} -> {:?}: old spoken {old_spoken}, new spoken {new_spoken}",
                sub.old, sub.new
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_corpus, parse_schema};
    use crate::postproc::parse_noun_db;

    const SCHEMA: &str = "\
slot hotel-type | type of the hotel
  value guesthouse
  value hotel
slot restaurant-name | name of the restaurant
slot taxi-destination | where the taxi goes
";

    const CORPUS: &str = "\
dialogue d1
  turn user
    texts.transcript i want a guesthouse
    state hotel-type=guesthouse
  turn system
    texts.transcript ok
  turn user
    texts.transcript its name is called bangkok city
    state hotel-type=guesthouse
    state restaurant-name=bangkok city
  turn system
    texts.transcript bangkok city is in the centre
  turn user
    texts.transcript thanks
    state hotel-type=guesthouse
    state restaurant-name=bangkok city
end
";

    fn setup() -> (Schema, Dialogue, NounDatabase) {
        let schema = parse_schema(SCHEMA).unwrap();
        let d = parse_corpus(CORPUS, &schema).unwrap().remove(0);
        let pool = parse_noun_db("restaurant-name\tgolden palace\n").unwrap();
        (schema, d, pool)
    }

    #[test]
    fn factor_one_is_identity() {
        let (schema, d, pool) = setup();
        let a = augment_dialogue(&d, &schema, &pool, 1, 5).unwrap();
        assert_eq!(a.variants.len(), 1);
        assert_eq!(a.variants[0].dialogue, d);
    }

    #[test]
    fn substitution_rewrites_texts_and_states() {
        let (schema, d, pool) = setup();
        let a = augment_dialogue(&d, &schema, &pool, 2, 5).unwrap();
        let v = &a.variants[1];
        assert_eq!(v.dialogue.id, "d1#aug1");
        assert_eq!(v.dialogue.turns[2].transcript(), "its name is called golden palace");
        assert_eq!(v.dialogue.turns[3].transcript(), "golden palace is in the centre");
        assert_eq!(v.dialogue.state_at_turn(1).unwrap().get("restaurant-name"), Some("golden palace"));
        assert_eq!(v.dialogue.state_at_turn(2).unwrap().get("restaurant-name"), Some("golden palace"));
        // categorical slot untouched
        assert_eq!(v.dialogue.state_at_turn(2).unwrap().get("hotel-type"), Some("guesthouse"));
        assert!(check_consistency(&d, v).is_empty());
    }

    #[test]
    fn deterministic() {
        let (schema, d, _) = setup();
        let pool = parse_noun_db("restaurant-name\ta\nrestaurant-name\tb\nrestaurant-name\tc\n").unwrap();
        let x = augment_dialogue(&d, &schema, &pool, 3, 42).unwrap();
        let y = augment_dialogue(&d, &schema, &pool, 3, 42).unwrap();
        assert_eq!(x, y);
        assert_eq!(x.variants.len(), 3);
    }

    #[test]
    fn errors_and_skips() {
        let (schema, d, _) = setup();
        assert_eq!(
            augment_dialogue(&d, &schema, &NounDatabase::new(), 0, 1),
            Err(AugmentError::ZeroFactor)
        );
        let a = augment_dialogue(&d, &schema, &NounDatabase::new(), 2, 1).unwrap();
        assert_eq!(a.variants[1].dialogue.turns[2].transcript(), d.turns[2].transcript());
        assert_eq!(a.skipped.len(), 1);
        assert_eq!(a.skipped[0].value, "bangkok city");
    }

    #[test]
    fn longer_values_claim_spans_first() {
        let schema = parse_schema(SCHEMA).unwrap();
        let corpus = "\
dialogue d2
  turn user
    texts.transcript a table at cambridge arms then a taxi to cambridge arms
    state restaurant-name=cambridge arms
    state taxi-destination=cambridge
end
";
        let d = parse_corpus(corpus, &schema).unwrap().remove(0);
        let pool = parse_noun_db("restaurant-name\tthe eagle\ntaxi-destination\tely\n").unwrap();
        let a = augment_dialogue(&d, &schema, &pool, 2, 1).unwrap();
        let v = &a.variants[1];
        assert_eq!(v.dialogue.turns[0].transcript(), "a table at the eagle then a taxi to the eagle");
        // "cambridge" only occurs inside the longer value, so it stays
        let st = v.dialogue.state_at_turn(0).unwrap();
        assert_eq!(st.get("taxi-destination"), Some("cambridge"));
        assert_eq!(st.get("restaurant-name"), Some("the eagle"));
        assert_eq!(v.substitutions.len(), 1);
        assert!(check_consistency(&d, v).is_empty());
    }
}
