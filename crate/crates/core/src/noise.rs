//! Deterministic ASR-noise channel.
//!
//! Turns clean transcripts into synthetic recognizer output. Three error
//! classes are simulated per whitespace token, each with its own
//! probability: clock times spelled out as words, special characters
//! dropped, and words swapped for acoustically confusable ones. The
//! confusion class is a stand-in for real recognizer behaviour, not a model
//! of it.
//!
//! Randomness comes from [`CounterRng`] keyed by `(seed, stream_key)`, with
//! the token index as stream and the rule as lane. Output is therefore a
//! pure function of `(text, config, stream_key)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::clock::{parse_clock, spell_time};
use crate::corpus::Dialogue;
use crate::rng::CounterRng;
use crate::text::{canonicalize, is_special, split_punct, strip_special, token_spans};

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("probability {name} = {value} is outside [0, 1]")]
    Probability { name: &'static str, value: f64 },
    #[error("confusion entry {word:?}: {message}")]
    Confusion { word: String, message: String },
    #[error("noise config line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dialogue {dialogue:?} turn {turn} already has variant {variant:?}")]
    VariantExists {
        dialogue: String,
        turn: usize,
        variant: String,
    },
}

/// Word → confusable alternatives.
pub type ConfusionTable = BTreeMap<String, Vec<String>>;

const DEFAULT_CONFUSIONS: &[(&str, &[&str])] = &[
    ("acorn", &["a corn"]),
    ("addenbrookes", &["adenbrooks"]),
    ("alexander", &["alexandra"]),
    ("allenbell", &["alan bell"]),
    ("arrive", &["arrived"]),
    ("ashley", &["ashly"]),
    ("autumn", &["autum"]),
    ("bangkok", &["bangok"]),
    ("booking", &["looking"]),
    ("british", &["brittish"]),
    ("cambridge", &["came bridge", "cambridges"]),
    ("centre", &["center"]),
    ("cheap", &["cheep"]),
    ("chinese", &["chinees"]),
    ("church", &["churches"]),
    ("cinema", &["cinemas"]),
    ("college", &["collage"]),
    ("east", &["yeast"]),
    ("eight", &["ate"]),
    ("ely", &["ealy"]),
    ("european", &["europeans"]),
    ("expensive", &["expansive"]),
    ("for", &["four"]),
    ("four", &["for"]),
    ("friday", &["fried day"]),
    ("guesthouse", &["guest house"]),
    ("guesthouses", &["guest houses"]),
    ("hotel", &["hotels"]),
    ("indian", &["indians"]),
    ("internet", &["intranet"]),
    ("italian", &["italians"]),
    ("kings", &["king"]),
    ("leave", &["leaf"]),
    ("lynn", &["lin"]),
    ("moderate", &["moderates"]),
    ("monday", &["mondays"]),
    ("museum", &["museums"]),
    ("night", &["knight"]),
    ("nights", &["knights"]),
    ("north", &["nor"]),
    ("norwich", &["norwitch"]),
    ("one", &["won"]),
    ("parking", &["barking"]),
    ("people", &["peoples"]),
    ("peterborough", &["peter borough"]),
    ("postcode", &["post code"]),
    ("reference", &["references"]),
    ("restaurant", &["restaurants"]),
    ("saturday", &["saturdays"]),
    ("south", &["sow"]),
    ("stansted", &["stanstead"]),
    ("star", &["stair"]),
    ("stars", &["stairs"]),
    ("sunday", &["sundae"]),
    ("taxi", &["taxis"]),
    ("thai", &["tie"]),
    ("thursday", &["thirsty"]),
    ("to", &["two", "too"]),
    ("train", &["trained"]),
    ("tuesday", &["twos day"]),
    ("two", &["to"]),
    ("wednesday", &["wednesdays"]),
    ("west", &["vest"]),
    ("wifi", &["why fi", "wi fi"]),
];

pub fn default_confusion_table() -> ConfusionTable {
    DEFAULT_CONFUSIONS
        .iter()
        .map(|(w, alts)| (w.to_string(), alts.iter().map(|a| a.to_string()).collect()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    pub strip_special_chars: f64,
    pub spell_out_times: f64,
    pub word_confusion: f64,
    pub confusion_table: ConfusionTable,
    pub seed: u64,
}

impl Default for NoiseConfig {
    /// All probabilities zero (identity channel) with the shipped table.
    fn default() -> Self {
        Self {
            strip_special_chars: 0.0,
            spell_out_times: 0.0,
            word_confusion: 0.0,
            confusion_table: default_confusion_table(),
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), NoiseError> {
        for (name, value) in [
            ("strip_special_chars", self.strip_special_chars),
            ("spell_out_times", self.spell_out_times),
            ("word_confusion", self.word_confusion),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(NoiseError::Probability { name, value });
            }
        }
        for (word, alts) in &self.confusion_table {
            let bad = |message: &str| NoiseError::Confusion {
                word: word.clone(),
                message: message.to_string(),
            };
            if word.is_empty() || word.contains(char::is_whitespace) || *word != canonicalize(word) {
                return Err(bad("key must be a single canonical word"));
            }
            if alts.is_empty() {
                return Err(bad("empty alternative list"));
            }
            for alt in alts {
                if alt.is_empty() || *alt != canonicalize(alt) {
                    return Err(bad("alternatives must be canonical and non-empty"));
                }
                if alt.chars().any(is_special) {
                    return Err(bad("alternatives may not contain special characters"));
                }
            }
        }
        Ok(())
    }
}

/// Parses `word<TAB>alt1,alt2` lines.
pub fn parse_confusion_table(text: &str) -> Result<ConfusionTable, NoiseError> {
    let mut table = ConfusionTable::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (word, alts) = line.split_once('\t').ok_or(NoiseError::Malformed {
            line: n + 1,
            message: "expected word<TAB>alt1,alt2".into(),
        })?;
        let alts: Vec<String> = alts
            .split(',')
            .map(canonicalize)
            .filter(|a| !a.is_empty())
            .collect();
        table.entry(canonicalize(word)).or_default().extend(alts);
    }
    Ok(table)
}

/// Parses the key=value noise config. `confusion_table` paths are resolved
/// against `base_dir`.
pub fn parse_noise_config(text: &str, base_dir: &Path) -> Result<NoiseConfig, NoiseError> {
    let mut cfg = NoiseConfig::default();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |message: String| NoiseError::Malformed {
            line: n + 1,
            message,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| malformed("expected key=value".into()))?;
        let (key, value) = (key.trim(), value.trim());
        let prob = || {
            value
                .parse::<f64>()
                .map_err(|_| malformed(format!("{key}: not a number: {value:?}")))
        };
        match key {
            "strip_special_chars" => cfg.strip_special_chars = prob()?,
            "spell_out_times" => cfg.spell_out_times = prob()?,
            "word_confusion" => cfg.word_confusion = prob()?,
            "seed" => {
                cfg.seed = value
                    .parse()
                    .map_err(|_| malformed(format!("seed: not an integer: {value:?}")))?
            }
            "confusion_table" => {
                let path = base_dir.join(value);
                let text = fs::read_to_string(&path).map_err(|source| NoiseError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                cfg.confusion_table = parse_confusion_table(&text)?;
            }
            other => return Err(malformed(format!("unknown key {other:?}"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_noise_config(path: impl AsRef<Path>) -> Result<NoiseConfig, NoiseError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| NoiseError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_noise_config(&text, path.parent().unwrap_or(Path::new(".")))
}

const LANE_TIME: u64 = 0;
const LANE_STRIP: u64 = 1;
const LANE_WORDS: u64 = 2;

fn corrupt_token(token: &str, cfg: &NoiseConfig, rng: &mut CounterRng, index: u64) -> String {
    let mut work = token.to_string();

    let (lead, core, trail) = split_punct(token);
    if let Some((h, m)) = parse_clock(core) {
        if rng.unit_at(index, LANE_TIME) < cfg.spell_out_times {
            work = format!("{lead}{}{trail}", spell_time(h, m));
        }
    }

    if work.chars().any(is_special) && rng.unit_at(index, LANE_STRIP) < cfg.strip_special_chars {
        work = strip_special(&work);
    }

    if cfg.word_confusion > 0.0 && !cfg.confusion_table.is_empty() {
        let words: Vec<String> = work
            .split(' ')
            .enumerate()
            .map(|(j, word)| {
                let (lead, core, trail) = split_punct(word);
                let lane = LANE_WORDS + 2 * j as u64;
                match cfg.confusion_table.get(core) {
                    Some(alts) if rng.unit_at(index, lane) < cfg.word_confusion => {
                        let pick = rng.u64_at(index, lane + 1) % alts.len() as u64;
                        format!("{lead}{}{trail}", alts[pick as usize])
                    }
                    _ => word.to_string(),
                }
            })
            .collect();
        work = words.join(" ");
    }
    work
}

/// Corrupts one utterance. Rules run per token in the order
/// times → special characters → confusions.
pub fn corrupt_utterance(text: &str, config: &NoiseConfig, stream_key: &str) -> String {
    let mut rng = CounterRng::new(config.seed, stream_key);
    let spans = token_spans(text);
    let mut changed = false;
    let mut pieces = Vec::with_capacity(spans.len());
    for (i, &(s, e)) in spans.iter().enumerate() {
        let token = &text[s..e];
        let out = corrupt_token(token, config, &mut rng, i as u64);
        changed |= out != token;
        pieces.push(out);
    }
    if !changed {
        return text.to_string();
    }
    pieces.retain(|p| !p.is_empty());
    pieces.join(" ")
}

/// Stream key of a turn: `<dialogue id>:<turn index>`.
pub fn turn_stream_key(dialogue_id: &str, turn: usize) -> String {
    format!("{dialogue_id}:{turn}")
}

/// Adds `target_variant` to every turn as the corrupted transcript.
pub fn corrupt_corpus(
    corpus: &[Dialogue],
    config: &NoiseConfig,
    target_variant: &str,
) -> Result<Vec<Dialogue>, NoiseError> {
    for d in corpus {
        for (i, t) in d.turns.iter().enumerate() {
            if t.texts.contains_key(target_variant) {
                return Err(NoiseError::VariantExists {
                    dialogue: d.id.clone(),
                    turn: i,
                    variant: target_variant.to_string(),
                });
            }
        }
    }
    Ok(corpus
        .par_iter()
        .map(|d| {
            let mut d = d.clone();
            for (i, turn) in d.turns.iter_mut().enumerate() {
                let noisy = corrupt_utterance(turn.transcript(), config, &turn_stream_key(&d.id, i));
                turn.texts.insert(target_variant.to_string(), noisy);
            }
            d
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(strip: f64, times: f64, conf: f64) -> NoiseConfig {
        NoiseConfig {
            strip_special_chars: strip,
            spell_out_times: times,
            word_confusion: conf,
            seed: 11,
            ..NoiseConfig::default()
        }
    }

    #[test]
    fn strip_rule() {
        assert_eq!(corrupt_utterance("i'd like a room", &cfg(1.0, 0.0, 0.0), "k"), "id like a room");
        assert_eq!(
            corrupt_utterance("a 4-star place, please.", &cfg(1.0, 0.0, 0.0), "k"),
            "a 4 star place please"
        );
    }

    #[test]
    fn time_rule() {
        assert_eq!(
            corrupt_utterance("arrive by 08:15", &cfg(0.0, 1.0, 0.0), "k"),
            "arrive by eight fifteen"
        );
        assert_eq!(
            corrupt_utterance("leave at 17:00.", &cfg(0.0, 1.0, 0.0), "k"),
            "leave at seventeen o'clock."
        );
        // the apostrophe of o'clock is then subject to stripping
        assert_eq!(
            corrupt_utterance("leave at 17:00.", &cfg(1.0, 1.0, 0.0), "k"),
            "leave at seventeen oclock"
        );
    }

    #[test]
    fn confusion_rule() {
        let out = corrupt_utterance("the centre of bangkok", &cfg(0.0, 0.0, 1.0), "k");
        assert_eq!(out, "the center of bangok");
    }

    #[test]
    fn zero_config_is_identity() {
        let text = "  odd   spacing, 08:15 i'd ";
        assert_eq!(corrupt_utterance(text, &cfg(0.0, 0.0, 0.0), "k"), text);
    }

    #[test]
    fn deterministic_per_key() {
        let c = cfg(0.5, 0.5, 0.5);
        let text = "i'd like to leave cambridge at 09:30, to go to the centre north of ely.";
        let a = corrupt_utterance(text, &c, "d:1");
        assert_eq!(a, corrupt_utterance(text, &c, "d:1"));
    }

    #[test]
    fn validation() {
        assert!(matches!(
            cfg(1.5, 0.0, 0.0).validate(),
            Err(NoiseError::Probability { name: "strip_special_chars", .. })
        ));
        let mut c = cfg(0.0, 0.0, 0.0);
        c.confusion_table.insert("x".into(), vec![]);
        assert!(c.validate().is_err());
        let mut c = cfg(0.0, 0.0, 0.0);
        c.confusion_table.insert("x".into(), vec!["y'z".into()]);
        assert!(c.validate().is_err());
        assert!(default_confusion_table().len() >= 50);
        assert!(NoiseConfig::default().validate().is_ok());
    }

    #[test]
    fn config_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("conf.tsv"), "centre\tcenter,sentre\n").unwrap();
        let text = "# noise\nstrip_special_chars = 1\nspell_out_times=0.25\nseed=9\nconfusion_table=conf.tsv\n";
        let c = parse_noise_config(text, dir.path()).unwrap();
        assert_eq!(c.strip_special_chars, 1.0);
        assert_eq!(c.spell_out_times, 0.25);
        assert_eq!(c.word_confusion, 0.0);
        assert_eq!(c.seed, 9);
        assert_eq!(c.confusion_table.len(), 1);
        assert_eq!(c.confusion_table["centre"], vec!["center", "sentre"]);
        assert!(parse_noise_config("bogus=1\n", dir.path()).is_err());
        assert!(parse_noise_config("word_confusion=2\n", dir.path()).is_err());
    }
}
