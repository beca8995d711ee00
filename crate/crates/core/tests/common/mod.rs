//! Independent reference implementations and generators shared by the
//! integration tests. Nothing here calls into the library's algorithms.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::IndexedRandom;
use rand::{Rng, RngCore};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

/// Exhaustive recursive edit distance: every branch is explored.
pub fn oracle_distance(a: &[char], b: &[char]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let diag = oracle_distance(ra, rb) + usize::from(x != y);
            let del = oracle_distance(ra, b) + 1;
            let ins = oracle_distance(a, rb) + 1;
            diag.min(del).min(ins)
        }
    }
}

pub type Pairs = Vec<(String, String)>;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSlot {
    pub support: u64,
    pub value_error: u64,
    pub overestimation: u64,
    pub underestimation: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub jga: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ser: Option<f64>,
    pub per_slot: BTreeMap<String, OracleSlot>,
}

fn lookup<'a>(pairs: &'a Pairs, slot: &str) -> Option<&'a str> {
    let mut found = None;
    for (s, v) in pairs {
        if s == slot {
            found = Some(v.as_str());
        }
    }
    found
}

fn same_assignments(a: &Pairs, b: &Pairs) -> bool {
    if a.len() != b.len() {
        return false;
    }
    for (s, v) in a {
        let mut hit = false;
        for (t, w) in b {
            if s == t && v == w {
                hit = true;
            }
        }
        if !hit {
            return false;
        }
    }
    true
}

/// Brute-force scorer over lists of (slot, value) pairs.
pub fn oracle_metrics(preds: &[Pairs], golds: &[Pairs]) -> OracleReport {
    assert_eq!(preds.len(), golds.len());
    let mut matches = 0u64;
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    let (mut s, mut d, mut i, mut n) = (0u64, 0u64, 0u64, 0u64);
    let mut per_slot: BTreeMap<String, OracleSlot> = BTreeMap::new();
    for k in 0..golds.len() {
        let (p, g) = (&preds[k], &golds[k]);
        if same_assignments(p, g) {
            matches += 1;
        }
        n += g.len() as u64;
        for (slot, gv) in g {
            match lookup(p, slot) {
                Some(pv) if pv == gv => tp += 1,
                Some(_) => {
                    s += 1;
                    fn_ += 1;
                }
                None => {
                    d += 1;
                    fn_ += 1;
                }
            }
        }
        for (slot, pv) in p {
            match lookup(g, slot) {
                Some(gv) if gv == pv => {}
                Some(_) => fp += 1,
                None => {
                    i += 1;
                    fp += 1;
                }
            }
        }
        let mut slots: Vec<&String> = Vec::new();
        for (slot, _) in g.iter().chain(p.iter()) {
            if !slots.contains(&slot) {
                slots.push(slot);
            }
        }
        for slot in slots {
            let e = per_slot.entry(slot.clone()).or_insert(OracleSlot {
                support: 0,
                value_error: 0,
                overestimation: 0,
                underestimation: 0,
            });
            e.support += 1;
            match (lookup(p, slot), lookup(g, slot)) {
                (Some(a), Some(b)) if a != b => e.value_error += 1,
                (Some(_), None) => e.overestimation += 1,
                (None, Some(_)) => e.underestimation += 1,
                _ => {}
            }
        }
    }
    let nothing = tp == 0 && fp == 0 && fn_ == 0;
    let ratio = |num: u64, den: u64| {
        if nothing {
            1.0
        } else if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    OracleReport {
        jga: matches as f64 / golds.len() as f64,
        tp,
        fp,
        fn_,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        ser: (n > 0).then(|| (s + d + i) as f64 / n as f64),
        per_slot,
    }
}

const WORDS: &[&str] = &[
    "north", "city", "bangkok", "golden", "palace", "red", "lion", "hall", "park", "cafe", "river", "king",
    "street", "house", "green", "blue", "star", "moon", "a", "the", "of", "and",
];

pub fn random_words(rng: &mut impl RngCore, max: usize) -> String {
    let n = rng.random_range(1..=max);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// A random open-slot value: words, digits, clock times or `dontcare`.
pub fn random_open_value(rng: &mut impl RngCore) -> String {
    match rng.random_range(0..10) {
        0 => "dontcare".into(),
        1 => format!("{:02}:{:02}", rng.random_range(0..24), rng.random_range(0..60)),
        2 => rng.random_range(0..100).to_string(),
        _ => random_words(rng, 3),
    }
}

/// Schema text with `n` slots, some categorical.
pub fn random_schema_text(rng: &mut impl RngCore, n: usize) -> String {
    let mut out = String::new();
    for k in 0..n {
        out.push_str(&format!("slot dom{}-slot{} | {}\n", k % 3, k, random_words(rng, 4)));
        if rng.random_bool(0.4) {
            let arity = rng.random_range(2..=5);
            let mut seen = Vec::new();
            while seen.len() < arity {
                let v = if rng.random_bool(0.3) {
                    format!("{} {}", random_words(rng, 1), seen.len())
                } else {
                    format!("v{}", seen.len())
                };
                if !seen.contains(&v) {
                    seen.push(v);
                }
            }
            for v in seen {
                out.push_str(&format!("  value {v}\n"));
            }
        }
    }
    out
}
