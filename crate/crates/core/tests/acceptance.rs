//! Acceptance suite. Runs without the libtest harness so that the
//! PASS/FAIL line for each criterion is always printed.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{fixture, oracle_distance, oracle_metrics, random_open_value, random_schema_text, random_words, Pairs};
use dstkit_core::augment::{augment_corpus, check_consistency};
use dstkit_core::corpus::{load_corpus, load_schema, parse_schema, render_corpus, DialogueState, Schema, Speaker};
use dstkit_core::correction::{
    lexicon_correct, normalize_format, sentence_error_rate, Lexicon, CONTRACTIONS, DEFAULT_MIN_RATIO,
};
use dstkit_core::d3st::{build_prompt, build_target, parse_state_string};
use dstkit_core::metrics::{
    error_cause_breakdown, evaluate, joint_goal_accuracy, per_slot_error_rates, slot_metrics, MetricsError,
};
use dstkit_core::noise::{corrupt_utterance, NoiseConfig};
use dstkit_core::pipeline::{run_pipeline, PipelineConfig};
use dstkit_core::postproc::{levenshtein_distance, load_noun_db, postprocess_state};
use dstkit_core::text::split_punct;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn random_state(rng: &mut impl RngCore, schema: &Schema) -> DialogueState {
    let mut s = DialogueState::new();
    for slot in schema.slots() {
        if rng.random_bool(0.5) {
            let v = if slot.is_categorical() {
                slot.values.choose(rng).unwrap().clone()
            } else {
                random_open_value(rng)
            };
            s.set(slot.name.clone(), &v);
        }
    }
    s
}

fn random_schema(rng: &mut impl RngCore) -> Schema {
    let n = rng.random_range(1..=12);
    parse_schema(&random_schema_text(rng, n)).expect("generated schema is valid")
}

fn history(rng: &mut impl RngCore) -> Vec<(Speaker, String)> {
    vec![
        (Speaker::User, random_words(rng, 8)),
        (Speaker::System, random_words(rng, 8)),
        (Speaker::User, random_words(rng, 8)),
    ]
}

fn d3st_round_trip() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut failures = 0;
    for k in 0..1000u64 {
        let schema = random_schema(&mut rng);
        let state = random_state(&mut rng, &schema);
        let prompt = build_prompt(&schema, &history(&mut rng), None);
        let seed = (k % 2 == 0).then_some(k);
        let target = build_target(&state, &prompt, seed).expect("state fits the prompt");
        let (parsed, issues) = parse_state_string(&target, &prompt, &schema);
        if parsed != state || !issues.is_empty() {
            failures += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        failures == 0 && elapsed < Duration::from_secs(5),
        format!("1000 pairs, {failures} mismatches, {:.2}s (limit 5s)", elapsed.as_secs_f64()),
    )
}

fn ordering_invariance() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut unstable = 0;
    let mut orders_seen = 0;
    for _ in 0..100 {
        let schema = random_schema(&mut rng);
        let state = random_state(&mut rng, &schema);
        let prompt = build_prompt(&schema, &history(&mut rng), None);
        let mut results = BTreeSet::new();
        let mut targets = BTreeSet::new();
        for seed in 0..20u64 {
            let target = build_target(&state, &prompt, Some(seed * 7919 + 1)).unwrap();
            let (parsed, issues) = parse_state_string(&target, &prompt, &schema);
            results.insert(format!("{parsed:?}{issues:?}"));
            targets.insert(target);
        }
        orders_seen += targets.len();
        if results.len() != 1 {
            unstable += 1;
        }
    }
    verdict(
        unstable == 0,
        format!("100 states x 20 seeds, {unstable} states with differing parses, {orders_seen} distinct target strings"),
    )
}

fn edit_distance_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let start = Instant::now();
    let word = |rng: &mut ChaCha8Rng| -> String {
        let n = rng.random_range(0..=6);
        (0..n).map(|_| *b"abc".choose(rng).unwrap() as char).collect()
    };
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let a = word(&mut rng);
        let b = word(&mut rng);
        let ac: Vec<char> = a.chars().collect();
        let bc: Vec<char> = b.chars().collect();
        if levenshtein_distance(&a, &b) != oracle_distance(&ac, &bc) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!("10000 pairs, {mismatches} mismatches, {:.2}s (limit 10s)", elapsed.as_secs_f64()),
    )
}

fn metric_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let slots = ["hotel-name", "hotel-type", "hotel-area", "train-day", "taxi-leaveat"];
    let values = ["a", "b", "c"];
    let pairs_state = |rng: &mut ChaCha8Rng| -> Pairs {
        let mut out = Vec::new();
        for s in slots {
            if rng.random_bool(0.4) {
                out.push((s.to_string(), values.choose(rng).unwrap().to_string()));
            }
        }
        out
    };
    let mut mismatches = Vec::new();
    for case in 0..500 {
        let turns = rng.random_range(1..=30);
        let mut golds: Vec<Pairs> = Vec::new();
        let mut preds: Vec<Pairs> = Vec::new();
        for _ in 0..turns {
            let g = pairs_state(&mut rng);
            // bias towards partially correct predictions
            let p = if rng.random_bool(0.3) { g.clone() } else { pairs_state(&mut rng) };
            golds.push(g);
            preds.push(p);
        }
        let to_states = |v: &[Pairs]| -> Vec<DialogueState> {
            v.iter()
                .map(|p| p.iter().map(|(s, x)| (s.as_str(), x.as_str())).collect())
                .collect()
        };
        let expect = oracle_metrics(&preds, &golds);
        let got = evaluate(&to_states(&preds), &to_states(&golds));
        let got = match got {
            Ok(r) => r,
            Err(e) => {
                mismatches.push(format!("case {case}: {e}"));
                continue;
            }
        };
        let mut per_slot = BTreeMap::new();
        for e in &got.per_slot {
            per_slot.insert(
                e.slot.clone(),
                common::OracleSlot {
                    support: e.support,
                    value_error: e.causes.value_error,
                    overestimation: e.causes.overestimation,
                    underestimation: e.causes.underestimation,
                },
            );
        }
        let (ps, gs) = (to_states(&preds), to_states(&golds));
        let oracle_rate = |o: &common::OracleSlot| {
            (o.value_error + o.overestimation + o.underestimation) as f64 / o.support as f64
        };
        let rates = per_slot_error_rates(&ps, &gs).unwrap();
        let rates_ok = rates.len() == expect.per_slot.len()
            && expect.per_slot.iter().all(|(slot, o)| {
                rates.get(slot).is_some_and(|r| r.error_rate == oracle_rate(o) && r.support == o.support)
                    && error_cause_breakdown(&ps, &gs, slot).is_ok_and(|c| {
                        (c.value_error, c.overestimation, c.underestimation)
                            == (o.value_error, o.overestimation, o.underestimation)
                    })
            })
            && got.per_slot.iter().all(|e| e.error_rate == oracle_rate(&expect.per_slot[&e.slot]));
        let standalone_ok = joint_goal_accuracy(&ps, &gs) == Ok(expect.jga)
            && match (slot_metrics(&ps, &gs), expect.ser) {
                (Ok(m), Some(ser)) => {
                    (m.precision, m.recall, m.f1, m.ser) == (expect.precision, expect.recall, expect.f1, ser)
                }
                (Err(MetricsError::UndefinedSer), None) => true,
                _ => false,
            };
        let same = standalone_ok
            && got.jga == expect.jga
            && got.counts.true_positives == expect.tp
            && got.counts.false_positives == expect.fp
            && got.counts.false_negatives == expect.fn_
            && got.slot_precision == expect.precision
            && got.slot_recall == expect.recall
            && got.slot_f1 == expect.f1
            && got.ser == expect.ser
            && per_slot == expect.per_slot
            && rates_ok;
        if !same {
            mismatches.push(format!("case {case}"));
        }
    }
    // the undefined-SER contract is part of the oracle too
    let empty = vec![DialogueState::new()];
    let undefined_ok = matches!(
        slot_metrics(&empty, &empty),
        Err(MetricsError::UndefinedSer)
    ) && oracle_metrics(&[vec![]], &[vec![]]).ser.is_none();
    verdict(
        mismatches.is_empty() && undefined_ok,
        format!("500 corpora, {} mismatches {:?}", mismatches.len(), mismatches.iter().take(3).collect::<Vec<_>>()),
    )
}

const FILLER: &[&str] = &[
    "like", "a", "table", "train", "taxi", "need", "want", "to", "leave", "arrive", "by", "for", "people",
    "please", "the", "hotel", "booking", "and", "also", "there", "here", "room", "tonight", "would", "be", "fine",
];

fn correction_direction() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let contractions: Vec<&str> = CONTRACTIONS
        .iter()
        .filter(|(bare, _)| *bare != "oclock")
        .map(|(_, c)| *c)
        .collect();
    let mut lexicon = Lexicon::new();
    for w in FILLER.iter().chain(contractions.iter()).chain(["at", "is", "it"].iter()) {
        lexicon.insert(w);
    }
    let cfg = NoiseConfig {
        strip_special_chars: 1.0,
        spell_out_times: 1.0,
        ..Default::default()
    };

    let mut refs = Vec::new();
    let mut hyps = Vec::new();
    let mut fixed = Vec::new();
    let (mut covered, mut restored) = (0usize, 0usize);
    for k in 0..200 {
        let mut words: Vec<String> = Vec::new();
        words.push(contractions.choose(&mut rng).unwrap().to_string());
        for _ in 0..rng.random_range(1..5) {
            words.push(FILLER.choose(&mut rng).unwrap().to_string());
        }
        if rng.random_bool(0.5) {
            words.push(contractions.choose(&mut rng).unwrap().to_string());
        }
        let minute = if rng.random_bool(0.2) { 0 } else { rng.random_range(0..60) };
        words.push("at".into());
        words.push(format!("{:02}:{:02}", rng.random_range(0..24), minute));
        for _ in 0..rng.random_range(0..3) {
            words.push(FILLER.choose(&mut rng).unwrap().to_string());
        }
        let mut reference = words.join(" ");
        if k % 5 == 0 {
            reference.push('?');
        }
        let hyp = corrupt_utterance(&reference, &cfg, &format!("synthetic:{k}"));
        let out = lexicon_correct(&normalize_format(&hyp), &lexicon, DEFAULT_MIN_RATIO);

        let ref_tokens: Vec<&str> = reference.split(' ').map(|t| split_punct(t).1).collect();
        let out_tokens: Vec<&str> = out.split(' ').map(|t| split_punct(t).1).collect();
        for (i, tok) in ref_tokens.iter().enumerate() {
            let is_time = tok.len() == 5 && tok.as_bytes()[2] == b':';
            if is_time || contractions.contains(tok) {
                covered += 1;
                if out_tokens.len() == ref_tokens.len() && out_tokens[i] == *tok {
                    restored += 1;
                }
            }
        }
        refs.push(reference);
        hyps.push(hyp);
        fixed.push(out);
    }
    let pairs = |h: &[String]| -> Vec<(String, String)> { h.iter().cloned().zip(refs.iter().cloned()).collect() };
    let before = pairs(&hyps);
    let after = pairs(&fixed);
    let ser = |p: &[(String, String)], strip| sentence_error_rate(p, strip).unwrap().sentence_error_rate;
    let (b_raw, b_strip) = (ser(&before, false), ser(&before, true));
    let (a_raw, a_strip) = (ser(&after, false), ser(&after, true));
    let rate = restored as f64 / covered as f64;
    verdict(
        a_raw < b_raw && b_strip <= b_raw && a_strip <= a_raw && rate >= 0.95,
        format!(
            "sentence error before {:.1}% -> after {:.1}%; stripped {:.1}% / {:.1}%; restored {restored}/{covered} = {:.1}% (need >=95%)",
            100.0 * b_raw,
            100.0 * a_raw,
            100.0 * b_strip,
            100.0 * a_strip,
            100.0 * rate
        ),
    )
}

fn random_edit(rng: &mut impl RngCore, s: &str) -> String {
    let mut chars: Vec<char> = s.chars().collect();
    let letter = (b'a' + rng.random_range(0..26u8)) as char;
    match rng.random_range(0..3) {
        0 if !chars.is_empty() => {
            let i = rng.random_range(0..chars.len());
            let mut c = letter;
            while c == chars[i] {
                c = (b'a' + rng.random_range(0..26u8)) as char;
            }
            chars[i] = c;
        }
        1 if chars.len() > 1 => {
            chars.remove(rng.random_range(0..chars.len()));
        }
        _ => chars.insert(rng.random_range(0..=chars.len()), letter),
    }
    chars.into_iter().collect()
}

fn noun_recovery() -> Verdict {
    let schema = parse_schema(
        "slot restaurant-name | name of the restaurant\n\
         slot hotel-name | name of the hotel\n\
         slot attraction-name | name of the attraction\n",
    )
    .unwrap();
    let db = load_noun_db(fixture("multiwoz_names.tsv")).expect("names fixture");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let slots: Vec<&str> = db.slots().collect();
    let (mut recovered, mut total) = (0, 0);
    let mut golds = Vec::new();
    let mut noisy = Vec::new();
    let mut fixed = Vec::new();
    let mut violations = 0;
    for _ in 0..500 {
        let slot = *slots.choose(&mut rng).unwrap();
        let names: Vec<&String> = db.values(slot).unwrap().iter().collect();
        let gold = names.choose(&mut rng).unwrap().to_string();
        let mut value = gold.clone();
        for _ in 0..rng.random_range(1..=2) {
            value = random_edit(&mut rng, &value);
        }
        let gold_state: DialogueState = [(slot, gold.as_str())].into_iter().collect();
        let noisy_state: DialogueState = [(slot, value.as_str())].into_iter().collect();
        let (after, log) = postprocess_state(&noisy_state, &db, &schema, DEFAULT_MIN_RATIO);
        total += 1;
        if after == gold_state {
            recovered += 1;
        }
        if db.values(slot).unwrap().contains(noisy_state.get(slot).unwrap()) && after != noisy_state {
            violations += 1;
        }
        if log.iter().any(|r| !db.values(&r.slot).unwrap().contains(&r.after)) {
            violations += 1;
        }
        // every DB member is a fixed point
        let (same, log) = postprocess_state(&gold_state, &db, &schema, DEFAULT_MIN_RATIO);
        if same != gold_state || !log.is_empty() {
            violations += 1;
        }
        golds.push(gold_state);
        noisy.push(noisy_state);
        fixed.push(after);
    }
    let ser = |p: &[DialogueState]| evaluate(p, &golds).unwrap().ser.unwrap();
    let (ser_before, ser_after) = (ser(&noisy), ser(&fixed));
    let rate = recovered as f64 / total as f64;
    verdict(
        rate >= 0.95 && ser_after < ser_before && violations == 0,
        format!(
            "recovered {recovered}/{total} = {:.1}% (need >=95%); name SER {:.3} -> {:.3}; {violations} DB-member alterations",
            100.0 * rate,
            ser_before,
            ser_after
        ),
    )
}

fn augmentation() -> Verdict {
    let schema = load_schema(fixture("schema.txt")).unwrap();
    let corpus = load_corpus(fixture("dialogues.corpus"), &schema).unwrap();
    let pool = load_noun_db(fixture("nouns.tsv")).unwrap();
    let run = || augment_corpus(&corpus, &schema, &pool, 100, 42).unwrap();
    let first = run();
    let second = run();
    let dialogues: Vec<_> = first.iter().flat_map(|a| a.dialogues().cloned()).collect();
    let mut violations = 0;
    for (original, aug) in corpus.iter().zip(&first) {
        for v in &aug.variants {
            violations += check_consistency(original, v).len();
        }
    }
    let render = |a: &[dstkit_core::augment::Augmentation]| {
        render_corpus(&a.iter().flat_map(|x| x.dialogues().cloned()).collect::<Vec<_>>())
    };
    let identical = render(&first) == render(&second);
    let distinct: BTreeSet<String> = dialogues
        .iter()
        .map(|d| render_corpus(std::slice::from_ref(d)).split_once('\n').unwrap().1.to_string())
        .collect();
    verdict(
        corpus.len() == 5 && dialogues.len() == 500 && violations == 0 && identical,
        format!(
            "{} -> {} dialogues ({} distinct), {violations} consistency violations, reruns identical: {identical}",
            corpus.len(),
            dialogues.len(),
            distinct.len()
        ),
    )
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn pipeline_determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for (k, workers) in [1usize, 4].into_iter().enumerate() {
        let mut cfg = PipelineConfig::load(fixture("pipeline.toml")).expect("fixture config");
        cfg.output.dir = tmp.path().join(format!("run{k}"));
        cfg.workers = workers;
        if let Err(e) = run_pipeline(&cfg) {
            return verdict(false, format!("pipeline failed: {e}"));
        }
        outputs.push(read_dir(&cfg.output.dir));
    }
    let same = outputs[0] == outputs[1];
    let bytes: usize = outputs[0].values().map(Vec::len).sum();
    verdict(
        same && outputs[0].len() >= 10,
        format!(
            "{} artifacts ({bytes} bytes) identical across runs with 1 and 4 workers: {same}",
            outputs[0].len()
        ),
    )
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let start = Instant::now();
    let criteria: [Criterion; 8] = [
        ("1 d3st round trip", d3st_round_trip),
        ("2 random-ordering invariance", ordering_invariance),
        ("3 edit-distance oracle", edit_distance_oracle),
        ("4 metric oracle", metric_oracle),
        ("5 correction direction", correction_direction),
        ("6 proper-noun recovery", noun_recovery),
        ("7 augmentation", augmentation),
        ("8 pipeline determinism", pipeline_determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let v = check();
        println!("{} criterion {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.passed);
    }
    let elapsed = start.elapsed();
    let in_budget = elapsed < Duration::from_secs(180);
    println!(
        "{} criterion 10 runtime budget: acceptance suite took {:.1}s (limit 180s)",
        if in_budget { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    failed += usize::from(!in_budget);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
