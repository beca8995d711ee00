//! Proper-noun recovery by Levenshtein similarity against a noun database.
//!
//! Whole slot values are compared (not tokens), since recognizer damage on
//! names like "bangkok city" often crosses word boundaries. Only slots
//! listed in the database are touched.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::corpus::{DialogueState, Schema};
use crate::text::canonicalize;

pub const DEFAULT_MIN_RATIO: f64 = 0.8;

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &ac) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &bc) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ac != bc);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - d / max(|a|, |b|)`, and 1 for two empty strings.
pub fn similarity_ratio(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein_distance(a, b) as f64 / longest as f64
}

/// Cheap lower bound on distance, used to skip hopeless candidates.
pub(crate) fn length_gap(a_len: usize, b_len: usize) -> usize {
    a_len.abs_diff(b_len)
}

#[derive(Debug, Error)]
pub enum NounDbError {
    #[error("io error on noun database {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("noun database line {line}: expected slot<TAB>value")]
    Malformed { line: usize },
    #[error("noun database slot {0:?} is not in the schema")]
    UnknownSlot(String),
}

/// Slot → canonical proper-noun inventory.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NounDatabase {
    entries: BTreeMap<String, BTreeSet<String>>,
}

impl NounDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, slot: &str, value: &str) {
        let value = canonicalize(value);
        if !value.is_empty() {
            self.entries.entry(slot.to_string()).or_default().insert(value);
        }
    }

    pub fn values(&self, slot: &str) -> Option<&BTreeSet<String>> {
        self.entries.get(slot)
    }

    pub fn contains_slot(&self, slot: &str) -> bool {
        self.entries.contains_key(slot)
    }

    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Errors if any slot is missing from `schema`.
    pub fn check_against(&self, schema: &Schema) -> Result<(), NounDbError> {
        match self.slots().find(|s| !schema.contains(s)) {
            Some(s) => Err(NounDbError::UnknownSlot(s.to_string())),
            None => Ok(()),
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (slot, values) in &self.entries {
            for v in values {
                out.push_str(&format!("{slot}\t{v}\n"));
            }
        }
        out
    }
}

impl<'a> FromIterator<(&'a str, &'a str)> for NounDatabase {
    fn from_iter<I: IntoIterator<Item = (&'a str, &'a str)>>(iter: I) -> Self {
        let mut db = Self::new();
        for (slot, value) in iter {
            db.insert(slot, value);
        }
        db
    }
}

/// Parses `slot<TAB>value` lines; duplicates are ignored.
pub fn parse_noun_db(text: &str) -> Result<NounDatabase, NounDbError> {
    let mut db = NounDatabase::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (slot, value) = line
            .split_once('\t')
            .ok_or(NounDbError::Malformed { line: n + 1 })?;
        let slot = slot.trim();
        if slot.is_empty() || canonicalize(value).is_empty() {
            return Err(NounDbError::Malformed { line: n + 1 });
        }
        db.insert(slot, value);
    }
    Ok(db)
}

pub fn load_noun_db(path: impl AsRef<Path>) -> Result<NounDatabase, NounDbError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| NounDbError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_noun_db(&text)
}

/// Best database entry for `value` under `slot`, with its ratio.
/// Ties on ratio resolve to the lexicographically smallest entry.
pub fn best_match<'a>(
    value: &str,
    candidates: impl IntoIterator<Item = &'a String>,
) -> Option<(&'a str, f64)> {
    let mut best: Option<(&'a str, f64)> = None;
    for cand in candidates {
        let r = similarity_ratio(value, cand);
        best = match best {
            // candidates arrive sorted from a BTreeSet, but don't rely on it
            Some((b, br)) if br > r || (br == r && b <= cand.as_str()) => Some((b, br)),
            _ => Some((cand.as_str(), r)),
        };
    }
    best
}

/// Returns the recovered value and whether it is a database member.
pub fn recover_value(slot: &str, value: &str, db: &NounDatabase, min_ratio: f64) -> (String, bool) {
    recover_with_ratio(slot, value, db, min_ratio)
        .map_or_else(|| (value.to_string(), false), |(v, _)| (v, true))
}

fn recover_with_ratio(slot: &str, value: &str, db: &NounDatabase, min_ratio: f64) -> Option<(String, f64)> {
    let values = db.values(slot)?;
    if values.contains(value) {
        return Some((value.to_string(), 1.0));
    }
    let (best, ratio) = best_match(value, values)?;
    (ratio >= min_ratio).then(|| (best.to_string(), ratio))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recovery {
    pub slot: String,
    pub before: String,
    pub after: String,
    pub ratio: f64,
}

/// Applies [`recover_value`] to open slots listed in the database.
pub fn postprocess_state(
    state: &DialogueState,
    db: &NounDatabase,
    schema: &Schema,
    min_ratio: f64,
) -> (DialogueState, Vec<Recovery>) {
    let mut out = state.clone();
    let mut log = Vec::new();
    for (slot, value) in state.iter() {
        let open = schema.get(slot).is_some_and(|s| !s.is_categorical());
        if !open || !db.contains_slot(slot) {
            continue;
        }
        if let Some((after, ratio)) = recover_with_ratio(slot, value, db, min_ratio) {
            if after != value {
                out.set(slot, &after);
                log.push(Recovery {
                    slot: slot.to_string(),
                    before: value.to_string(),
                    after,
                    ratio,
                });
            }
        }
    }
    (out, log)
}
