//! Dialogue state tracking evaluation.
//!
//! All metrics are computed from integer tallies accumulated per turn.
//! Tallies add associatively, so the parallel reduction is exact and gives
//! the same report as a sequential pass.
//!
//! Definitions (report version [`METRICS_VERSION`]):
//!
//! * JGA: fraction of turns whose predicted assignment set equals gold.
//! * TP / FP / FN: matching, predicted-only and gold-only (slot, value) pairs.
//! * P = TP/(TP+FP), R = TP/(TP+FN), F1 = 2TP/(2TP+FP+FN). An undefined
//!   ratio is 0, except that all three are 1 when TP = FP = FN = 0.
//! * SER = (S + D + I) / N_gold, where S counts slots in both with
//!   different values, D gold-only slots, I predicted-only slots. It can
//!   exceed 1 and is undefined when there are no gold slots.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::ops::Add;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::DialogueState;

pub const METRICS_VERSION: &str = "dstkit-metrics/1 ser=(S+D+I)/N_gold";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{preds} predictions for {golds} gold turns")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("no turns to evaluate")]
    Empty,
    #[error("slot error rate is undefined: no gold slots")]
    UndefinedSer,
}

fn check_aligned(preds: &[DialogueState], golds: &[DialogueState]) -> Result<(), MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CauseCounts {
    pub value_error: u64,
    pub overestimation: u64,
    pub underestimation: u64,
}

impl CauseCounts {
    pub fn total(&self) -> u64 {
        self.value_error + self.overestimation + self.underestimation
    }
}

impl Add for CauseCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            value_error: self.value_error + o.value_error,
            overestimation: self.overestimation + o.overestimation,
            underestimation: self.underestimation + o.underestimation,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SlotTally {
    /// Turns where the slot is in gold or prediction.
    pub support: u64,
    pub causes: CauseCounts,
}

impl SlotTally {
    pub fn errors(&self) -> u64 {
        self.causes.total()
    }
}

impl Add for SlotTally {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            support: self.support + o.support,
            causes: self.causes + o.causes,
        }
    }
}

/// Integer tallies over a set of turns.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Tally {
    pub turns: u64,
    pub joint_matches: u64,
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
    pub substitutions: u64,
    pub deletions: u64,
    pub insertions: u64,
    pub gold_slots: u64,
    pub per_slot: BTreeMap<String, SlotTally>,
}

impl Add for Tally {
    type Output = Self;
    fn add(mut self, o: Self) -> Self {
        self.turns += o.turns;
        self.joint_matches += o.joint_matches;
        self.true_positives += o.true_positives;
        self.false_positives += o.false_positives;
        self.false_negatives += o.false_negatives;
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.gold_slots += o.gold_slots;
        for (slot, t) in o.per_slot {
            let e = self.per_slot.entry(slot).or_default();
            *e = *e + t;
        }
        self
    }
}

impl Tally {
    pub fn of_turn(pred: &DialogueState, gold: &DialogueState) -> Self {
        let mut t = Tally {
            turns: 1,
            joint_matches: u64::from(pred == gold),
            gold_slots: gold.len() as u64,
            ..Default::default()
        };
        let slots: BTreeSet<&str> = pred.keys().chain(gold.keys()).collect();
        for slot in slots {
            let mut causes = CauseCounts::default();
            match (pred.get(slot), gold.get(slot)) {
                (Some(p), Some(g)) if p == g => t.true_positives += 1,
                (Some(_), Some(_)) => {
                    t.false_positives += 1;
                    t.false_negatives += 1;
                    t.substitutions += 1;
                    causes.value_error = 1;
                }
                (Some(_), None) => {
                    t.false_positives += 1;
                    t.insertions += 1;
                    causes.overestimation = 1;
                }
                (None, Some(_)) => {
                    t.false_negatives += 1;
                    t.deletions += 1;
                    causes.underestimation = 1;
                }
                (None, None) => unreachable!("slot came from one of the states"),
            }
            t.per_slot.insert(slot.to_string(), SlotTally { support: 1, causes });
        }
        t
    }

    /// Tallies aligned turn lists, reducing in parallel.
    pub fn of(preds: &[DialogueState], golds: &[DialogueState]) -> Result<Self, MetricsError> {
        check_aligned(preds, golds)?;
        Ok(preds
            .par_iter()
            .zip(golds)
            .map(|(p, g)| Tally::of_turn(p, g))
            .reduce(Tally::default, Tally::add))
    }

    /// Same as [`Tally::of`] but strictly sequential.
    pub fn of_sequential(preds: &[DialogueState], golds: &[DialogueState]) -> Result<Self, MetricsError> {
        check_aligned(preds, golds)?;
        Ok(preds
            .iter()
            .zip(golds)
            .map(|(p, g)| Tally::of_turn(p, g))
            .fold(Tally::default(), Tally::add))
    }

    pub fn jga(&self) -> Result<f64, MetricsError> {
        if self.turns == 0 {
            return Err(MetricsError::Empty);
        }
        Ok(self.joint_matches as f64 / self.turns as f64)
    }

    fn all_clear(&self) -> bool {
        self.true_positives + self.false_positives + self.false_negatives == 0
    }

    pub fn precision(&self) -> f64 {
        let d = self.true_positives + self.false_positives;
        match d {
            0 if self.all_clear() => 1.0,
            0 => 0.0,
            d => self.true_positives as f64 / d as f64,
        }
    }

    pub fn recall(&self) -> f64 {
        let d = self.true_positives + self.false_negatives;
        match d {
            0 if self.all_clear() => 1.0,
            0 => 0.0,
            d => self.true_positives as f64 / d as f64,
        }
    }

    pub fn f1(&self) -> f64 {
        if self.all_clear() {
            return 1.0;
        }
        let tp2 = 2 * self.true_positives;
        tp2 as f64 / (tp2 + self.false_positives + self.false_negatives) as f64
    }

    pub fn ser(&self) -> Result<f64, MetricsError> {
        if self.gold_slots == 0 {
            return Err(MetricsError::UndefinedSer);
        }
        let errors = self.substitutions + self.deletions + self.insertions;
        Ok(errors as f64 / self.gold_slots as f64)
    }
}

pub fn joint_goal_accuracy(preds: &[DialogueState], golds: &[DialogueState]) -> Result<f64, MetricsError> {
    check_aligned(preds, golds)?;
    if golds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / golds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlotMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ser: f64,
}

pub fn slot_metrics(preds: &[DialogueState], golds: &[DialogueState]) -> Result<SlotMetrics, MetricsError> {
    let t = Tally::of(preds, golds)?;
    Ok(SlotMetrics {
        precision: t.precision(),
        recall: t.recall(),
        f1: t.f1(),
        ser: t.ser()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlotErrorRate {
    pub error_rate: f64,
    pub support: u64,
}

/// Per-slot error rate over turns where the slot is in gold or prediction.
pub fn per_slot_error_rates(
    preds: &[DialogueState],
    golds: &[DialogueState],
) -> Result<BTreeMap<String, SlotErrorRate>, MetricsError> {
    let t = Tally::of(preds, golds)?;
    Ok(t.per_slot
        .into_iter()
        .map(|(slot, s)| {
            (
                slot,
                SlotErrorRate {
                    error_rate: s.errors() as f64 / s.support as f64,
                    support: s.support,
                },
            )
        })
        .collect())
}

pub fn error_cause_breakdown(
    preds: &[DialogueState],
    golds: &[DialogueState],
    slot: &str,
) -> Result<CauseCounts, MetricsError> {
    check_aligned(preds, golds)?;
    let mut c = CauseCounts::default();
    for (p, g) in preds.iter().zip(golds) {
        match (p.get(slot), g.get(slot)) {
            (Some(a), Some(b)) if a != b => c.value_error += 1,
            (Some(_), None) => c.overestimation += 1,
            (None, Some(_)) => c.underestimation += 1,
            _ => {}
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerSlotEntry {
    pub slot: String,
    pub error_rate: f64,
    pub support: u64,
    pub errors: u64,
    pub causes: CauseCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub version: String,
    pub turns: u64,
    pub jga: f64,
    pub slot_precision: f64,
    pub slot_recall: f64,
    pub slot_f1: f64,
    /// `None` when there are no gold slots.
    pub ser: Option<f64>,
    pub counts: Tally,
    /// Sorted by descending error rate, then slot name.
    pub per_slot: Vec<PerSlotEntry>,
}

impl EvalReport {
    pub fn from_tally(t: Tally) -> Result<Self, MetricsError> {
        let mut per_slot: Vec<PerSlotEntry> = t
            .per_slot
            .iter()
            .map(|(slot, s)| PerSlotEntry {
                slot: slot.clone(),
                error_rate: s.errors() as f64 / s.support as f64,
                support: s.support,
                errors: s.errors(),
                causes: s.causes,
            })
            .collect();
        per_slot.sort_by(|a, b| {
            b.error_rate
                .total_cmp(&a.error_rate)
                .then_with(|| a.slot.cmp(&b.slot))
        });
        Ok(Self {
            version: METRICS_VERSION.to_string(),
            turns: t.turns,
            jga: t.jga()?,
            slot_precision: t.precision(),
            slot_recall: t.recall(),
            slot_f1: t.f1(),
            ser: t.ser().ok(),
            counts: t,
            per_slot,
        })
    }

    pub fn causes(&self, slot: &str) -> Option<CauseCounts> {
        self.counts.per_slot.get(slot).map(|s| s.causes)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Aligned plain-text rendering.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let pct = |x: f64| format!("{:.2}", 100.0 * x);
        let _ = writeln!(out, "# {}", self.version);
        let _ = writeln!(out, "turns      {}", self.turns);
        let _ = writeln!(out, "JGA        {}", pct(self.jga));
        let _ = writeln!(out, "precision  {}", pct(self.slot_precision));
        let _ = writeln!(out, "recall     {}", pct(self.slot_recall));
        let _ = writeln!(out, "F1         {}", pct(self.slot_f1));
        let _ = writeln!(out, "SER        {}", self.ser.map_or("undefined".to_string(), pct));
        let _ = writeln!(out);
        let width = self.per_slot.iter().map(|e| e.slot.len()).max().unwrap_or(4).max(4);
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>7}  {:>6}  {:>5}  {:>5}  {:>5}",
            "slot", "err%", "support", "errors", "value", "over", "under"
        );
        for e in &self.per_slot {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8}  {:>7}  {:>6}  {:>5}  {:>5}  {:>5}",
                e.slot,
                pct(e.error_rate),
                e.support,
                e.errors,
                e.causes.value_error,
                e.causes.overestimation,
                e.causes.underestimation
            );
        }
        out
    }
}

/// Full evaluation of aligned prediction and gold states.
pub fn evaluate(preds: &[DialogueState], golds: &[DialogueState]) -> Result<EvalReport, MetricsError> {
    EvalReport::from_tally(Tally::of(preds, golds)?)
}
