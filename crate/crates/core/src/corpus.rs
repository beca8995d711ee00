//! Dialogue corpora, slot schemas and ASR time alignments.
//!
//! File grammars are documented in `docs/formats.md`. Everything read from
//! disk is canonicalized on the way in (see [`crate::text::canonicalize`]),
//! so later stages never see mixed case or stray whitespace.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::canonicalize;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("io error reading schema {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("invalid slot name {0:?}: expected lowercase <domain>-<slot>")]
    InvalidName(String),
    #[error("duplicate slot {0:?}")]
    DuplicateSlot(String),
    #[error("categorical slot {slot:?} has {count} distinct value(s); at least 2 required")]
    Arity { slot: String, count: usize },
    #[error("slot {slot:?} lists value {value:?} twice")]
    DuplicateValue { slot: String, value: String },
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("dialogue {dialogue:?} turn {turn}: speakers must alternate starting with user")]
    NonAlternating { dialogue: String, turn: usize },
    #[error("dialogue {dialogue:?} turn {turn}: missing \"transcript\" text")]
    MissingTranscript { dialogue: String, turn: usize },
    #[error("dialogue {dialogue:?} turn {turn}: unknown slot {slot:?}")]
    UnknownSlot {
        dialogue: String,
        turn: usize,
        slot: String,
    },
    #[error("dialogue {dialogue:?} turn {turn}: state lines are only allowed on user turns")]
    StateOnSystemTurn { dialogue: String, turn: usize },
    #[error("duplicate dialogue id {0:?}")]
    DuplicateDialogue(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AlignmentError {
    #[error("word {0:?} has no following t:<frame>")]
    DanglingWord(String),
    #[error("invalid frame in {0:?}")]
    BadFrame(String),
    #[error("unexpected token {0:?}; expected w:<word> or t:<frame>")]
    UnexpectedToken(String),
    #[error("frame decreases at entry {index}: {previous} -> {current}")]
    Decreasing {
        index: usize,
        previous: u64,
        current: u64,
    },
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("user turn {index} out of range; dialogue has {count} user turn(s)")]
pub struct TurnRangeError {
    pub index: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotDef {
    pub name: String,
    pub description: String,
    /// Closed value inventory; empty for open (non-categorical) slots.
    pub values: Vec<String>,
}

impl SlotDef {
    pub fn is_categorical(&self) -> bool {
        !self.values.is_empty()
    }
}

/// Ordered slot inventory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    slots: Vec<SlotDef>,
    by_name: HashMap<String, usize>,
}

pub fn is_valid_slot_name(name: &str) -> bool {
    let part_ok = |p: &str| {
        !p.is_empty()
            && p.starts_with(|c: char| c.is_ascii_lowercase())
            && p.chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
    };
    match name.split_once('-') {
        Some((domain, slot)) => part_ok(domain) && part_ok(slot),
        None => false,
    }
}

impl Schema {
    /// Builds a schema, enforcing name shape, uniqueness and value arity.
    pub fn new(slots: Vec<SlotDef>) -> Result<Self, SchemaError> {
        let mut by_name = HashMap::with_capacity(slots.len());
        for (i, slot) in slots.iter().enumerate() {
            if !is_valid_slot_name(&slot.name) {
                return Err(SchemaError::InvalidName(slot.name.clone()));
            }
            if by_name.insert(slot.name.clone(), i).is_some() {
                return Err(SchemaError::DuplicateSlot(slot.name.clone()));
            }
            let mut seen = HashSet::new();
            for v in &slot.values {
                if !seen.insert(v.as_str()) {
                    return Err(SchemaError::DuplicateValue {
                        slot: slot.name.clone(),
                        value: v.clone(),
                    });
                }
            }
            if slot.values.len() == 1 {
                return Err(SchemaError::Arity {
                    slot: slot.name.clone(),
                    count: 1,
                });
            }
        }
        Ok(Self { slots, by_name })
    }

    pub fn slots(&self) -> &[SlotDef] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&SlotDef> {
        self.by_name.get(name).map(|&i| &self.slots[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for slot in &self.slots {
            out.push_str(&format!("slot {} | {}\n", slot.name, slot.description));
            for v in &slot.values {
                out.push_str(&format!("  value {v}\n"));
            }
        }
        out
    }
}

pub fn parse_schema(text: &str) -> Result<Schema, SchemaError> {
    let mut slots: Vec<SlotDef> = Vec::new();
    let mut names = HashSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.trim_end();
        let body = line.trim_start();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let indented = body.len() != line.len();
        if let Some(rest) = body.strip_prefix("slot ") {
            if indented {
                return Err(SchemaError::Malformed {
                    line: line_no,
                    message: "slot lines must not be indented".into(),
                });
            }
            let (name, description) = rest.split_once('|').ok_or(SchemaError::Malformed {
                line: line_no,
                message: "expected `slot <name> | <description>`".into(),
            })?;
            let name = name.trim().to_string();
            if !is_valid_slot_name(&name) {
                return Err(SchemaError::InvalidName(name));
            }
            if !names.insert(name.clone()) {
                return Err(SchemaError::DuplicateSlot(name));
            }
            let description = canonicalize(description);
            if description.is_empty() {
                return Err(SchemaError::Malformed {
                    line: line_no,
                    message: format!("slot {name:?} has an empty description"),
                });
            }
            slots.push(SlotDef {
                name,
                description,
                values: Vec::new(),
            });
        } else if let Some(value) = body.strip_prefix("value ") {
            let slot = match slots.last_mut() {
                Some(s) if indented => s,
                _ => {
                    return Err(SchemaError::Malformed {
                        line: line_no,
                        message: "value line must be indented under a slot".into(),
                    })
                }
            };
            let value = canonicalize(value);
            if value.is_empty() {
                return Err(SchemaError::Malformed {
                    line: line_no,
                    message: format!("empty value for slot {:?}", slot.name),
                });
            }
            slot.values.push(value);
        } else {
            return Err(SchemaError::Malformed {
                line: line_no,
                message: format!("unrecognised line {body:?}"),
            });
        }
    }
    Schema::new(slots)
}

pub fn load_schema(path: impl AsRef<Path>) -> Result<Schema, SchemaError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| SchemaError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_schema(&text)
}

/// Slot assignments of one turn. Absent keys mean "none".
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DialogueState(BTreeMap<String, String>);

impl DialogueState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a canonicalized value. Empty values and the "none" sentinel
    /// remove the slot instead.
    pub fn set(&mut self, slot: impl Into<String>, value: &str) {
        let slot = slot.into();
        let value = canonicalize(value);
        if value.is_empty() || value == "none" {
            self.0.remove(&slot);
        } else {
            self.0.insert(slot, value);
        }
    }

    pub fn remove(&mut self, slot: &str) -> Option<String> {
        self.0.remove(slot)
    }

    pub fn get(&self, slot: &str) -> Option<&str> {
        self.0.get(slot).map(String::as_str)
    }

    pub fn contains(&self, slot: &str) -> bool {
        self.0.contains_key(slot)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    /// First key not present in `schema`.
    pub fn unknown_slot<'a>(&'a self, schema: &Schema) -> Option<&'a str> {
        self.keys().find(|k| !schema.contains(k))
    }
}

impl<K: Into<String>, V: AsRef<str>> FromIterator<(K, V)> for DialogueState {
    fn from_iter<I: IntoIterator<Item = (K, V)>>(iter: I) -> Self {
        let mut s = Self::new();
        for (k, v) in iter {
            s.set(k, v.as_ref());
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

impl Speaker {
    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::User => "user",
            Speaker::System => "system",
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const TRANSCRIPT: &str = "transcript";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub speaker: Speaker,
    /// Variant name → utterance text.
    pub texts: BTreeMap<String, String>,
    /// Cumulative gold state; `Some` exactly on user turns.
    pub state: Option<DialogueState>,
}

impl Turn {
    pub fn transcript(&self) -> &str {
        self.texts.get(TRANSCRIPT).map_or("", String::as_str)
    }

    /// Text of `variant`, falling back to the transcript.
    pub fn text_or_transcript(&self, variant: &str) -> &str {
        self.texts
            .get(variant)
            .map_or_else(|| self.transcript(), String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
}

/// A slot that vanished between consecutive user turns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CumulativeViolation {
    pub dialogue: String,
    pub user_turn: usize,
    pub slot: String,
}

impl Dialogue {
    pub fn user_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(|t| t.speaker == Speaker::User)
    }

    pub fn user_turn_count(&self) -> usize {
        self.user_turns().count()
    }

    /// Gold cumulative state attached to the `index`-th user turn.
    pub fn state_at_turn(&self, index: usize) -> Result<&DialogueState, TurnRangeError> {
        self.user_turns()
            .nth(index)
            .and_then(|t| t.state.as_ref())
            .ok_or(TurnRangeError {
                index,
                count: self.user_turn_count(),
            })
    }

    /// Gold states of all user turns in order.
    pub fn gold_states(&self) -> Vec<DialogueState> {
        self.user_turns()
            .map(|t| t.state.clone().unwrap_or_default())
            .collect()
    }

    /// Reports slots present at user turn t but missing at t+1.
    pub fn check_cumulative(&self) -> Vec<CumulativeViolation> {
        let states = self.gold_states();
        let mut out = Vec::new();
        for (t, pair) in states.windows(2).enumerate() {
            for k in pair[0].keys() {
                if !pair[1].contains(k) {
                    out.push(CumulativeViolation {
                        dialogue: self.id.clone(),
                        user_turn: t + 1,
                        slot: k.to_string(),
                    });
                }
            }
        }
        out
    }

    /// Checks alternation, transcript presence and state placement.
    pub fn validate(&self, schema: &Schema) -> Result<(), CorpusError> {
        for (i, turn) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::User } else { Speaker::System };
            if turn.speaker != expected {
                return Err(CorpusError::NonAlternating {
                    dialogue: self.id.clone(),
                    turn: i,
                });
            }
            if !turn.texts.contains_key(TRANSCRIPT) {
                return Err(CorpusError::MissingTranscript {
                    dialogue: self.id.clone(),
                    turn: i,
                });
            }
            match (&turn.state, turn.speaker) {
                (Some(_), Speaker::System) => {
                    return Err(CorpusError::StateOnSystemTurn {
                        dialogue: self.id.clone(),
                        turn: i,
                    })
                }
                (None, Speaker::User) => {
                    return Err(CorpusError::Malformed {
                        line: 0,
                        message: format!("dialogue {:?} user turn {i} lacks a state", self.id),
                    })
                }
                (Some(state), Speaker::User) => {
                    if let Some(slot) = state.unknown_slot(schema) {
                        return Err(CorpusError::UnknownSlot {
                            dialogue: self.id.clone(),
                            turn: i,
                            slot: slot.to_string(),
                        });
                    }
                }
                (None, Speaker::System) => {}
            }
        }
        Ok(())
    }
}

/// Parses the corpus record format and validates every dialogue against `schema`.
pub fn parse_corpus(text: &str, schema: &Schema) -> Result<Vec<Dialogue>, CorpusError> {
    let malformed = |line: usize, message: String| CorpusError::Malformed { line, message };
    let mut dialogues: Vec<Dialogue> = Vec::new();
    let mut ids = HashSet::new();
    let mut current: Option<Dialogue> = None;

    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let body = raw.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let (keyword, rest) = match body.split_once(char::is_whitespace) {
            Some((k, r)) => (k, r.trim()),
            None => (body, ""),
        };
        match keyword {
            "dialogue" => {
                if current.is_some() {
                    return Err(malformed(line_no, "nested dialogue; missing `end`".into()));
                }
                if rest.is_empty() {
                    return Err(malformed(line_no, "dialogue id is empty".into()));
                }
                if !ids.insert(rest.to_string()) {
                    return Err(CorpusError::DuplicateDialogue(rest.to_string()));
                }
                current = Some(Dialogue {
                    id: rest.to_string(),
                    turns: Vec::new(),
                });
            }
            "end" => {
                let d = current
                    .take()
                    .ok_or_else(|| malformed(line_no, "`end` outside a dialogue".into()))?;
                d.validate(schema)?;
                dialogues.push(d);
            }
            "turn" => {
                let d = current
                    .as_mut()
                    .ok_or_else(|| malformed(line_no, "`turn` outside a dialogue".into()))?;
                let speaker = match rest {
                    "user" => Speaker::User,
                    "system" => Speaker::System,
                    other => return Err(malformed(line_no, format!("unknown speaker {other:?}"))),
                };
                d.turns.push(Turn {
                    speaker,
                    texts: BTreeMap::new(),
                    state: (speaker == Speaker::User).then(DialogueState::new),
                });
            }
            "state" => {
                let d = current
                    .as_mut()
                    .ok_or_else(|| malformed(line_no, "`state` outside a dialogue".into()))?;
                let turn_index = d.turns.len().saturating_sub(1);
                let turn = d
                    .turns
                    .last_mut()
                    .ok_or_else(|| malformed(line_no, "`state` before any turn".into()))?;
                let Some(state) = turn.state.as_mut() else {
                    return Err(CorpusError::StateOnSystemTurn {
                        dialogue: d.id.clone(),
                        turn: turn_index,
                    });
                };
                let (slot, value) = rest
                    .split_once('=')
                    .ok_or_else(|| malformed(line_no, "expected `state <slot>=<value>`".into()))?;
                let slot = slot.trim();
                if !schema.contains(slot) {
                    return Err(CorpusError::UnknownSlot {
                        dialogue: d.id.clone(),
                        turn: turn_index,
                        slot: slot.to_string(),
                    });
                }
                if state.contains(slot) {
                    return Err(malformed(line_no, format!("slot {slot:?} assigned twice")));
                }
                state.set(slot, value);
            }
            kw if kw.starts_with("texts.") => {
                let variant = &kw["texts.".len()..];
                if variant.is_empty() {
                    return Err(malformed(line_no, "empty variant name".into()));
                }
                let turn = current
                    .as_mut()
                    .and_then(|d| d.turns.last_mut())
                    .ok_or_else(|| malformed(line_no, "text line outside a turn".into()))?;
                if turn
                    .texts
                    .insert(variant.to_string(), canonicalize(rest))
                    .is_some()
                {
                    return Err(malformed(line_no, format!("variant {variant:?} given twice")));
                }
            }
            other => return Err(malformed(line_no, format!("unknown keyword {other:?}"))),
        }
    }
    if let Some(d) = current {
        return Err(malformed(
            text.lines().count(),
            format!("dialogue {:?} is missing `end`", d.id),
        ));
    }
    Ok(dialogues)
}

pub fn load_corpus(path: impl AsRef<Path>, schema: &Schema) -> Result<Vec<Dialogue>, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&text, schema)
}

/// Renders dialogues in the corpus record format. Variants are written in
/// name order and state slots in key order, so output is deterministic.
pub fn render_corpus(dialogues: &[Dialogue]) -> String {
    let mut out = String::new();
    for (i, d) in dialogues.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!("dialogue {}\n", d.id));
        for turn in &d.turns {
            out.push_str(&format!("  turn {}\n", turn.speaker));
            for (variant, text) in &turn.texts {
                out.push_str(&format!("    texts.{variant} {text}\n"));
            }
            if let Some(state) = &turn.state {
                for (slot, value) in state.iter() {
                    out.push_str(&format!("    state {slot}={value}\n"));
                }
            }
        }
        out.push_str("end\n");
    }
    out
}

pub fn write_corpus(path: impl AsRef<Path>, dialogues: &[Dialogue]) -> std::io::Result<()> {
    fs::write(path, render_corpus(dialogues))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedWord {
    pub word: String,
    pub frame: u64,
}

/// Recognized words mapped to encoder frame offsets.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedWords {
    pub entries: Vec<AlignedWord>,
}

impl AlignedWords {
    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("w:{} t:{}", e.word, e.frame))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Parses `w:<token> t:<frame>` pairs, e.g. `w:while t:2 w:in t:5`.
pub fn parse_time_alignment(text: &str) -> Result<AlignedWords, AlignmentError> {
    let mut entries: Vec<AlignedWord> = Vec::new();
    let mut tokens = text.split_whitespace();
    while let Some(tok) = tokens.next() {
        let word = tok
            .strip_prefix("w:")
            .ok_or_else(|| AlignmentError::UnexpectedToken(tok.to_string()))?;
        let frame_tok = tokens
            .next()
            .ok_or_else(|| AlignmentError::DanglingWord(word.to_string()))?;
        let frame: u64 = match frame_tok.strip_prefix("t:") {
            Some(f) => f
                .parse()
                .map_err(|_| AlignmentError::BadFrame(frame_tok.to_string()))?,
            None if frame_tok.starts_with("w:") => {
                return Err(AlignmentError::DanglingWord(word.to_string()))
            }
            None => return Err(AlignmentError::UnexpectedToken(frame_tok.to_string())),
        };
        if let Some(prev) = entries.last() {
            if frame < prev.frame {
                return Err(AlignmentError::Decreasing {
                    index: entries.len(),
                    previous: prev.frame,
                    current: frame,
                });
            }
        }
        entries.push(AlignedWord {
            word: word.to_string(),
            frame,
        });
    }
    Ok(AlignedWords { entries })
}
