//! Rule- and lexicon-based ASR error correction, plus the sentence error
//! rate used to score it.
//!
//! The rule corrector repairs formatting damage (spelled-out clock times,
//! contractions that lost their apostrophe). The lexicon corrector then maps
//! out-of-vocabulary words to their unique closest lexicon entry. Neural
//! correctors plug in through [`crate::adapter`].

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::clock::{format_clock, read_spelled_time};
use crate::corpus::Schema;
use crate::postproc::{length_gap, similarity_ratio};
use crate::text::{canonicalize, split_punct, strip_special};

pub const DEFAULT_MIN_RATIO: f64 = 0.8;

/// Bare form → contraction. Bare forms that are ordinary words ("its",
/// "well", "were", "ill", "wed", "lets", "shell") are left out on purpose.
pub const CONTRACTIONS: &[(&str, &str)] = &[
    ("arent", "aren't"),
    ("cant", "can't"),
    ("couldnt", "couldn't"),
    ("didnt", "didn't"),
    ("doesnt", "doesn't"),
    ("dont", "don't"),
    ("hadnt", "hadn't"),
    ("hasnt", "hasn't"),
    ("havent", "haven't"),
    ("heres", "here's"),
    ("id", "i'd"),
    ("im", "i'm"),
    ("isnt", "isn't"),
    ("itll", "it'll"),
    ("ive", "i've"),
    ("oclock", "o'clock"),
    ("shouldnt", "shouldn't"),
    ("thats", "that's"),
    ("theres", "there's"),
    ("theyd", "they'd"),
    ("theyll", "they'll"),
    ("theyre", "they're"),
    ("theyve", "they've"),
    ("wasnt", "wasn't"),
    ("werent", "weren't"),
    ("weve", "we've"),
    ("whats", "what's"),
    ("wheres", "where's"),
    ("wont", "won't"),
    ("wouldnt", "wouldn't"),
    ("youd", "you'd"),
    ("youll", "you'll"),
    ("youre", "you're"),
    ("youve", "you've"),
];

pub fn contraction_for(bare: &str) -> Option<&'static str> {
    CONTRACTIONS
        .binary_search_by(|(b, _)| b.cmp(&bare))
        .ok()
        .map(|i| CONTRACTIONS[i].1)
}

const MAX_TIME_WORDS: usize = 4;

/// Rewrites spelled clock times to `HH:MM` and restores apostrophes on
/// contractions from [`CONTRACTIONS`]. Idempotent.
pub fn normalize_format(text: &str) -> String {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let parts: Vec<(&str, &str, &str)> = tokens.iter().map(|t| split_punct(t)).collect();
    let mut out: Vec<String> = Vec::with_capacity(tokens.len());
    let mut changed = false;
    let mut i = 0;
    while i < tokens.len() {
        let end = (i + MAX_TIME_WORDS).min(tokens.len());
        let cores: Vec<&str> = parts[i..end].iter().map(|p| p.1).collect();
        if let Some((h, m, used)) = read_spelled_time(&cores) {
            // punctuation may only sit before the first word or after the last
            let clean = (i..i + used).all(|j| {
                (j == i || parts[j].0.is_empty()) && (j == i + used - 1 || parts[j].2.is_empty())
            });
            if clean {
                let (lead, trail) = (parts[i].0, parts[i + used - 1].2);
                out.push(format!("{lead}{}{trail}", format_clock(h, m)));
                changed = true;
                i += used;
                continue;
            }
        }
        let (lead, core, trail) = parts[i];
        match contraction_for(core) {
            Some(c) => {
                out.push(format!("{lead}{c}{trail}"));
                changed = true;
            }
            None => out.push(tokens[i].to_string()),
        }
        i += 1;
    }
    if changed {
        out.join(" ")
    } else {
        text.to_string()
    }
}

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("io error on lexicon {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Target vocabulary for correction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    entries: BTreeSet<String>,
    protected: BTreeSet<String>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, word: &str) {
        let w = canonicalize(word);
        if !w.is_empty() {
            self.entries.insert(w);
        }
    }

    /// Adds `word` as an entry that is never rewritten.
    pub fn protect(&mut self, word: &str) {
        let w = canonicalize(word);
        if !w.is_empty() {
            self.entries.insert(w.clone());
            self.protected.insert(w);
        }
    }

    /// Protects every word of every categorical value in `schema`.
    pub fn protect_schema_values(&mut self, schema: &Schema) {
        for slot in schema.slots() {
            for v in &slot.values {
                for w in v.split(' ') {
                    self.protect(w);
                }
            }
        }
    }

    /// Adds the words of `text` (punctuation peeled) as entries.
    pub fn extend_from_text(&mut self, text: &str) {
        for tok in text.split_whitespace() {
            let (_, core, _) = split_punct(tok);
            self.insert(core);
        }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains(word)
    }

    pub fn is_protected(&self, word: &str) -> bool {
        self.protected.contains(word)
    }

    pub fn entries(&self) -> &BTreeSet<String> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One word per line; a leading `!` marks the word protected.
pub fn parse_lexicon(text: &str) -> Lexicon {
    let mut lex = Lexicon::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.strip_prefix('!') {
            Some(w) => lex.protect(w),
            None => lex.insert(line),
        }
    }
    lex
}

pub fn load_lexicon(path: impl AsRef<Path>) -> Result<Lexicon, LexiconError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| LexiconError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(parse_lexicon(&text))
}

fn unique_best<'a>(word: &str, lexicon: &'a Lexicon, min_ratio: f64) -> Option<&'a str> {
    let len = word.chars().count();
    let mut best: Option<&str> = None;
    let mut best_ratio = min_ratio;
    let mut tied = false;
    for cand in lexicon.entries() {
        let clen = cand.chars().count();
        let longest = len.max(clen) as f64;
        if 1.0 - length_gap(len, clen) as f64 / longest < best_ratio {
            continue;
        }
        let r = similarity_ratio(word, cand);
        if r > best_ratio || (best.is_none() && r >= best_ratio) {
            best = Some(cand);
            best_ratio = r;
            tied = false;
        } else if r == best_ratio && best.is_some() {
            tied = true;
        }
    }
    if tied {
        None
    } else {
        best
    }
}

/// Replaces each out-of-lexicon word by its unique most similar entry with
/// ratio at least `min_ratio`. Ties and words containing digits are left
/// alone.
pub fn lexicon_correct(text: &str, lexicon: &Lexicon, min_ratio: f64) -> String {
    let mut changed = false;
    let out: Vec<String> = text
        .split_whitespace()
        .map(|tok| {
            let (lead, core, trail) = split_punct(tok);
            let skip = core.is_empty()
                || lexicon.contains(core)
                || lexicon.is_protected(core)
                || core.chars().any(|c| c.is_ascii_digit());
            if !skip {
                if let Some(rep) = unique_best(core, lexicon, min_ratio) {
                    changed = true;
                    return format!("{lead}{rep}{trail}");
                }
            }
            tok.to_string()
        })
        .collect();
    if changed {
        out.join(" ")
    } else {
        text.to_string()
    }
}

/// Rule correction followed by lexicon correction (when a lexicon is given).
pub fn correct_text(text: &str, lexicon: Option<&Lexicon>, min_ratio: f64) -> String {
    let normalized = normalize_format(text);
    match lexicon {
        Some(lex) => lexicon_correct(&normalized, lex, min_ratio),
        None => normalized,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrectionReport {
    pub pairs_total: usize,
    pub pairs_incorrect: usize,
    pub sentence_error_rate: f64,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("sentence error rate needs at least one pair")]
pub struct EmptyPairs;

/// Fraction of (hypothesis, reference) pairs that differ after
/// canonicalization, and after special-character stripping when
/// `strip_special` is set.
pub fn sentence_error_rate<H, R>(pairs: &[(H, R)], strip_special_chars: bool) -> Result<CorrectionReport, EmptyPairs>
where
    H: AsRef<str>,
    R: AsRef<str>,
{
    if pairs.is_empty() {
        return Err(EmptyPairs);
    }
    let prep = |s: &str| {
        if strip_special_chars {
            strip_special(s)
        } else {
            canonicalize(s)
        }
    };
    let incorrect = pairs
        .iter()
        .filter(|(h, r)| prep(h.as_ref()) != prep(r.as_ref()))
        .count();
    Ok(CorrectionReport {
        pairs_total: pairs.len(),
        pairs_incorrect: incorrect,
        sentence_error_rate: incorrect as f64 / pairs.len() as f64,
    })
}
