//! Config-driven orchestration of the stages
//! ingest, augment, noise, correct, prompts, decode, postprocess, eval.
//!
//! Every input file is loaded and checked before anything is written, so a
//! bad config leaves no partial output. Each enabled stage writes a fixed
//! artifact name into the output directory; dialogues keep their input
//! order throughout, so identical configs give byte-identical artifacts.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{run_lanes, AdapterEndpoint, AdapterError, ItemError};
use crate::augment::{augment_corpus, Skipped};
use crate::corpus::{load_corpus, load_schema, render_corpus, Dialogue, DialogueState, Schema, TRANSCRIPT};
use crate::correction::{correct_text, load_lexicon, Lexicon, DEFAULT_MIN_RATIO as CORRECTION_MIN_RATIO};
use crate::d3st::{build_examples, parse_state_string, prompt_for_turn, ParseIssue, PromptOptions, TrainingRecord};
use crate::metrics::{evaluate, EvalReport};
use crate::noise::{corrupt_corpus, load_noise_config, NoiseConfig};
use crate::postproc::{load_noun_db, postprocess_state, NounDatabase, Recovery, DEFAULT_MIN_RATIO};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Augment,
    Noise,
    Correct,
    Prompts,
    Decode,
    Postprocess,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Augment,
        Stage::Noise,
        Stage::Correct,
        Stage::Prompts,
        Stage::Decode,
        Stage::Postprocess,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Augment => "augment",
            Stage::Noise => "noise",
            Stage::Correct => "correct",
            Stage::Prompts => "prompts",
            Stage::Decode => "decode",
            Stage::Postprocess => "postprocess",
            Stage::Eval => "eval",
        }
    }

    /// Artifact written by the stage, relative to the output directory.
    pub fn artifact(self) -> &'static str {
        match self {
            Stage::Ingest => "01_ingest.corpus",
            Stage::Augment => "02_augment.corpus",
            Stage::Noise => "03_noise.corpus",
            Stage::Correct => "04_correct.corpus",
            Stage::Prompts => "05_prompts.jsonl",
            Stage::Decode => "06_decode.jsonl",
            Stage::Postprocess => "07_postprocess.jsonl",
            Stage::Eval => "report.json",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const REPORT_TABLE: &str = "report.txt";
pub const AUGMENT_SKIPPED: &str = "02_augment_skipped.jsonl";
pub const RECOVERIES: &str = "07_recoveries.jsonl";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage order: {0}")]
    StageOrder(String),
    #[error("{stage}: missing input file {}", path.display())]
    MissingInput { stage: Stage, path: PathBuf },
    #[error("{stage}: {}: {message}", path.display())]
    Data { stage: Stage, path: PathBuf, message: String },
    #[error("{stage}: {message}")]
    Stage { stage: Stage, message: String },
    #[error("{stage}: adapter {command:?}: {message}")]
    Adapter { stage: Stage, command: String, message: String },
    #[error("{stage}: cannot write {}: {source}", path.display())]
    Write {
        stage: Stage,
        path: PathBuf,
        source: std::io::Error,
    },
}

impl PipelineError {
    /// 1 usage/config, 2 data, 3 adapter.
    pub fn exit_code(&self) -> u8 {
        match self {
            PipelineError::Config(_) | PipelineError::StageOrder(_) | PipelineError::MissingInput { .. } => 1,
            PipelineError::Data { .. } | PipelineError::Stage { .. } | PipelineError::Write { .. } => 2,
            PipelineError::Adapter { .. } => 3,
        }
    }
}

fn default_variant() -> String {
    TRANSCRIPT.to_string()
}

fn default_stages() -> Vec<Stage> {
    vec![Stage::Ingest, Stage::Eval]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputsConfig {
    pub schema: PathBuf,
    pub corpus: PathBuf,
    /// Text variant the chain starts from.
    #[serde(default = "default_variant")]
    pub variant: String,
    pub noun_db: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub noise_config: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagesConfig {
    #[serde(default = "default_stages")]
    pub stages: Vec<Stage>,
}

impl Default for StagesConfig {
    fn default() -> Self {
        Self { stages: default_stages() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub correction_min_ratio: f64,
    pub postprocess_min_ratio: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            correction_min_ratio: CORRECTION_MIN_RATIO,
            postprocess_min_ratio: DEFAULT_MIN_RATIO,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub command: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    /// Adapter processes per batch.
    #[serde(default = "default_lanes")]
    pub lanes: usize,
}

fn default_timeout() -> f64 {
    30.0
}

fn default_lanes() -> usize {
    1
}

impl AdapterConfig {
    pub fn endpoint(&self) -> AdapterEndpoint {
        AdapterEndpoint::new(self.command.clone()).with_timeout(Duration::from_secs_f64(self.timeout_secs))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub factor: usize,
    /// Replacement pool; defaults to `inputs.noun_db`.
    pub pool: Option<PathBuf>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { factor: 2, pool: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseStageConfig {
    pub variant: String,
}

impl Default for NoiseStageConfig {
    fn default() -> Self {
        Self { variant: "asr".into() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectConfig {
    pub variant: String,
    /// Route correction through the adapter instead of the local rules.
    pub use_adapter: bool,
}

impl Default for CorrectConfig {
    fn default() -> Self {
        Self {
            variant: "corrected".into(),
            use_adapter: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptsConfig {
    pub shuffle_slots: bool,
    pub shuffle_targets: bool,
}

impl Default for PromptsConfig {
    fn default() -> Self {
        Self {
            shuffle_slots: false,
            shuffle_targets: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeSource {
    /// Send prompts to the adapter (task `dst`).
    #[default]
    Adapter,
    /// Read model outputs from `decode.outputs`.
    File,
    /// Use the gold targets as model outputs.
    Gold,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub source: DecodeSource,
    pub outputs: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed. When set it also replaces the noise config's seed.
    pub seed: Option<u64>,
    /// Worker pool size; 0 or absent means one per CPU.
    #[serde(default)]
    pub workers: usize,
    pub inputs: InputsConfig,
    #[serde(default)]
    pub pipeline: StagesConfig,
    #[serde(default)]
    pub thresholds: Thresholds,
    pub adapter: Option<AdapterConfig>,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub noise: NoiseStageConfig,
    #[serde(default)]
    pub correct: CorrectConfig,
    #[serde(default)]
    pub prompts: PromptsConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    pub output: OutputConfig,
}

impl PipelineConfig {
    /// Parses TOML; relative paths are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.inputs.schema);
        fix(&mut self.inputs.corpus);
        for p in [
            &mut self.inputs.noun_db,
            &mut self.inputs.lexicon,
            &mut self.inputs.noise_config,
            &mut self.augment.pool,
            &mut self.decode.outputs,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output.dir);
        if let Some(adapter) = &mut self.adapter {
            // a command naming a relative path is taken relative to the config
            if let Some(first) = adapter.command.first_mut() {
                if first.contains('/') && Path::new(first.as_str()).is_relative() {
                    *first = base.join(first.as_str()).display().to_string();
                }
            }
        }
    }

    pub fn has(&self, stage: Stage) -> bool {
        self.pipeline.stages.contains(&stage)
    }

    /// Stage list must start with ingest, follow the canonical order
    /// without repeats, and include each stage's producers.
    pub fn check_stages(&self) -> Result<(), PipelineError> {
        let stages = &self.pipeline.stages;
        if stages.first() != Some(&Stage::Ingest) {
            return Err(PipelineError::StageOrder("the first stage must be ingest".into()));
        }
        for pair in stages.windows(2) {
            if pair[0] >= pair[1] {
                return Err(PipelineError::StageOrder(format!(
                    "{} cannot follow {}; order is {}",
                    pair[1],
                    pair[0],
                    Stage::ALL.map(Stage::name).join(" -> ")
                )));
            }
        }
        let requires = [(Stage::Decode, Stage::Prompts), (Stage::Postprocess, Stage::Decode)];
        for (stage, needed) in requires {
            if self.has(stage) && !self.has(needed) {
                return Err(PipelineError::StageOrder(format!("{stage} requires {needed}")));
            }
        }
        Ok(())
    }
}

/// One model output, keyed by user turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub output: String,
}

/// One decoded (and possibly post-processed) prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub state: DialogueState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default, skip_deserializing, skip_serializing_if = "Vec::is_empty")]
    pub issues: Vec<ParseIssue>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct RecoveryRecord<'a> {
    dialogue_id: &'a str,
    turn_index: usize,
    #[serde(flatten)]
    recovery: &'a Recovery,
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Reads a JSONL file; blank lines are skipped.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, String> {
    let file = fs::File::open(path).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", n + 1))?);
    }
    Ok(out)
}

/// Gold states of every user turn, in corpus order.
pub fn gold_states(corpus: &[Dialogue]) -> Vec<DialogueState> {
    corpus.iter().flat_map(Dialogue::gold_states).collect()
}

/// Keys of every user turn, in corpus order.
pub fn turn_keys(corpus: &[Dialogue]) -> Vec<(String, usize)> {
    corpus
        .iter()
        .flat_map(|d| (0..d.user_turn_count()).map(move |t| (d.id.clone(), t)))
        .collect()
}

/// Aligns predictions with the corpus turns. Missing turns are an error.
pub fn align_predictions(corpus: &[Dialogue], records: &[PredictionRecord]) -> Result<Vec<DialogueState>, String> {
    let by_key: HashMap<(&str, usize), &DialogueState> = records
        .iter()
        .map(|r| ((r.dialogue_id.as_str(), r.turn_index), &r.state))
        .collect();
    turn_keys(corpus)
        .iter()
        .map(|(id, t)| {
            by_key
                .get(&(id.as_str(), *t))
                .map(|s| (*s).clone())
                .ok_or_else(|| format!("no prediction for dialogue {id:?} turn {t}"))
        })
        .collect()
}

/// Applies per-turn text correction to `source` and stores it as `target`.
pub fn correct_corpus(
    corpus: &[Dialogue],
    source: &str,
    target: &str,
    lexicon: Option<&Lexicon>,
    min_ratio: f64,
) -> Vec<Dialogue> {
    corpus
        .par_iter()
        .map(|d| {
            let mut d = d.clone();
            for turn in &mut d.turns {
                let fixed = correct_text(turn.text_or_transcript(source), lexicon, min_ratio);
                turn.texts.insert(target.to_string(), fixed);
            }
            d
        })
        .collect()
}

/// Same as [`correct_corpus`] but through an adapter (task `correct`).
pub fn correct_corpus_with_adapter(
    corpus: &[Dialogue],
    source: &str,
    target: &str,
    endpoint: &AdapterEndpoint,
    lanes: usize,
) -> Result<Vec<Dialogue>, AdapterFailure> {
    let inputs: Vec<String> = corpus
        .iter()
        .flat_map(|d| d.turns.iter().map(|t| t.text_or_transcript(source).to_string()))
        .collect();
    let outputs = adapter_outputs(endpoint, "correct", &inputs, lanes)?;
    let mut it = outputs.into_iter();
    Ok(corpus
        .iter()
        .map(|d| {
            let mut d = d.clone();
            for turn in &mut d.turns {
                turn.texts.insert(target.to_string(), it.next().expect("one output per turn"));
            }
            d
        })
        .collect())
}

#[derive(Debug, Error)]
pub enum AdapterFailure {
    #[error(transparent)]
    Launch(#[from] AdapterError),
    #[error("{failed} of {total} requests failed; first: {first}")]
    Items { failed: usize, total: usize, first: ItemError },
}

fn adapter_outputs(
    endpoint: &AdapterEndpoint,
    task: &str,
    inputs: &[String],
    lanes: usize,
) -> Result<Vec<String>, AdapterFailure> {
    let batch = run_lanes(endpoint, task, inputs, lanes)?;
    let total = batch.outputs.len();
    let failed = batch.error_count();
    let mut outs = Vec::with_capacity(total);
    for o in batch.outputs {
        match o {
            Ok(s) => outs.push(s),
            Err(first) => return Err(AdapterFailure::Items { failed, total, first }),
        }
    }
    Ok(outs)
}

/// Prompt records for every user turn.
pub fn export_prompts(
    corpus: &[Dialogue],
    schema: &Schema,
    variant: &str,
    options: PromptOptions,
) -> Result<Vec<TrainingRecord>, crate::d3st::TargetError> {
    let per: Result<Vec<Vec<TrainingRecord>>, _> = corpus
        .par_iter()
        .map(|d| build_examples(d, schema, variant, options))
        .collect();
    Ok(per?.into_iter().flatten().collect())
}

/// Prompt input texts for every user turn, aligned with [`turn_keys`].
pub fn prompt_inputs(corpus: &[Dialogue], schema: &Schema, variant: &str, options: PromptOptions) -> Vec<String> {
    let per: Vec<Vec<String>> = corpus
        .par_iter()
        .map(|d| {
            (0..d.user_turn_count())
                .map(|t| {
                    prompt_for_turn(d, t, schema, variant, options)
                        .expect("turn exists")
                        .input_text
                })
                .collect()
        })
        .collect();
    per.into_iter().flatten().collect()
}

/// Parses model outputs against the prompts they answer. `outputs` must be
/// aligned with [`turn_keys`].
pub fn decode_outputs(
    corpus: &[Dialogue],
    schema: &Schema,
    variant: &str,
    options: PromptOptions,
    outputs: &[String],
) -> Vec<PredictionRecord> {
    let mut offsets = Vec::with_capacity(corpus.len());
    let mut acc = 0;
    for d in corpus {
        offsets.push(acc);
        acc += d.user_turn_count();
    }
    assert_eq!(acc, outputs.len(), "one output per user turn");
    let per: Vec<Vec<PredictionRecord>> = corpus
        .par_iter()
        .zip(offsets)
        .map(|(d, base)| {
            (0..d.user_turn_count())
                .map(|t| {
                    let prompt = prompt_for_turn(d, t, schema, variant, options).expect("turn exists");
                    let output = &outputs[base + t];
                    let (state, issues) = parse_state_string(output, &prompt, schema);
                    PredictionRecord {
                        dialogue_id: d.id.clone(),
                        turn_index: t,
                        state,
                        output: Some(output.clone()),
                        issues,
                    }
                })
                .collect()
        })
        .collect();
    per.into_iter().flatten().collect()
}

/// Post-processes every prediction; returns the new records and a log.
pub fn postprocess_predictions(
    records: &[PredictionRecord],
    db: &NounDatabase,
    schema: &Schema,
    min_ratio: f64,
) -> (Vec<PredictionRecord>, Vec<(String, usize, Recovery)>) {
    let results: Vec<(PredictionRecord, Vec<Recovery>)> = records
        .par_iter()
        .map(|r| {
            let (state, log) = postprocess_state(&r.state, db, schema, min_ratio);
            let mut r = r.clone();
            r.state = state;
            (r, log)
        })
        .collect();
    let mut out = Vec::with_capacity(results.len());
    let mut log = Vec::new();
    for (r, l) in results {
        log.extend(l.into_iter().map(|rec| (r.dialogue_id.clone(), r.turn_index, rec)));
        out.push(r);
    }
    (out, log)
}

pub fn recoveries_jsonl(log: &[(String, usize, Recovery)]) -> String {
    let records: Vec<RecoveryRecord> = log
        .iter()
        .map(|(id, t, r)| RecoveryRecord {
            dialogue_id: id,
            turn_index: *t,
            recovery: r,
        })
        .collect();
    to_jsonl(&records)
}

pub fn skipped_jsonl(skipped: &[Skipped]) -> String {
    to_jsonl(skipped)
}

/// Everything loaded up front.
struct Inputs {
    schema: Schema,
    corpus: Vec<Dialogue>,
    noun_db: Option<NounDatabase>,
    pool: Option<NounDatabase>,
    lexicon: Option<Lexicon>,
    noise: Option<NoiseConfig>,
    model_outputs: Option<Vec<ModelOutput>>,
}

fn require(stage: Stage, path: &Option<PathBuf>, what: &str) -> Result<PathBuf, PipelineError> {
    let path = path
        .clone()
        .ok_or_else(|| PipelineError::Config(format!("stage {stage} needs {what}")))?;
    if !path.is_file() {
        return Err(PipelineError::MissingInput { stage, path });
    }
    Ok(path)
}

fn existing(stage: Stage, path: &Path) -> Result<(), PipelineError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(PipelineError::MissingInput {
            stage,
            path: path.to_path_buf(),
        })
    }
}

fn data_err(stage: Stage, path: &Path) -> impl Fn(String) -> PipelineError + '_ {
    move |message| PipelineError::Data {
        stage,
        path: path.to_path_buf(),
        message,
    }
}

fn load_inputs(cfg: &PipelineConfig) -> Result<Inputs, PipelineError> {
    // existence first, so the error names the first missing file
    existing(Stage::Ingest, &cfg.inputs.schema)?;
    existing(Stage::Ingest, &cfg.inputs.corpus)?;
    let noun_db_path = if cfg.has(Stage::Postprocess) {
        Some(require(Stage::Postprocess, &cfg.inputs.noun_db, "inputs.noun_db")?)
    } else {
        None
    };
    let pool_path = if cfg.has(Stage::Augment) {
        let p = cfg.augment.pool.clone().or_else(|| cfg.inputs.noun_db.clone());
        Some(require(Stage::Augment, &p, "augment.pool or inputs.noun_db")?)
    } else {
        None
    };
    let noise_path = if cfg.has(Stage::Noise) {
        Some(require(Stage::Noise, &cfg.inputs.noise_config, "inputs.noise_config")?)
    } else {
        None
    };
    let lexicon_path = match (&cfg.inputs.lexicon, cfg.has(Stage::Correct) && !cfg.correct.use_adapter) {
        (Some(_), true) => Some(require(Stage::Correct, &cfg.inputs.lexicon, "inputs.lexicon")?),
        _ => None,
    };
    let outputs_path = if cfg.has(Stage::Decode) && cfg.decode.source == DecodeSource::File {
        Some(require(Stage::Decode, &cfg.decode.outputs, "decode.outputs")?)
    } else {
        None
    };
    let needs_adapter = (cfg.has(Stage::Correct) && cfg.correct.use_adapter)
        || (cfg.has(Stage::Decode) && cfg.decode.source == DecodeSource::Adapter);
    if needs_adapter {
        let stage = if cfg.has(Stage::Correct) && cfg.correct.use_adapter {
            Stage::Correct
        } else {
            Stage::Decode
        };
        let adapter = cfg
            .adapter
            .as_ref()
            .ok_or_else(|| PipelineError::Config(format!("stage {stage} needs an [adapter] section")))?;
        let Some(program) = adapter.command.first() else {
            return Err(PipelineError::Config("adapter.command is empty".into()));
        };
        if program.contains('/') && !Path::new(program).is_file() {
            return Err(PipelineError::Adapter {
                stage,
                command: program.clone(),
                message: "executable not found".into(),
            });
        }
    }
    if !(0.0..=1.0).contains(&cfg.thresholds.correction_min_ratio)
        || !(0.0..=1.0).contains(&cfg.thresholds.postprocess_min_ratio)
    {
        return Err(PipelineError::Config("thresholds must lie in [0, 1]".into()));
    }
    if cfg.has(Stage::Augment) && cfg.augment.factor == 0 {
        return Err(PipelineError::Config("augment.factor must be at least 1".into()));
    }

    let schema = load_schema(&cfg.inputs.schema).map_err(|e| data_err(Stage::Ingest, &cfg.inputs.schema)(e.to_string()))?;
    let corpus = load_corpus(&cfg.inputs.corpus, &schema)
        .map_err(|e| data_err(Stage::Ingest, &cfg.inputs.corpus)(e.to_string()))?;
    let load_db = |stage: Stage, path: &Path| -> Result<NounDatabase, PipelineError> {
        let db = load_noun_db(path).map_err(|e| data_err(stage, path)(e.to_string()))?;
        db.check_against(&schema).map_err(|e| data_err(stage, path)(e.to_string()))?;
        Ok(db)
    };
    let noun_db = noun_db_path.as_deref().map(|p| load_db(Stage::Postprocess, p)).transpose()?;
    let pool = pool_path.as_deref().map(|p| load_db(Stage::Augment, p)).transpose()?;
    let noise = noise_path
        .as_deref()
        .map(|p| {
            let mut n = load_noise_config(p).map_err(|e| data_err(Stage::Noise, p)(e.to_string()))?;
            if let Some(seed) = cfg.seed {
                n.seed = seed;
            }
            Ok::<_, PipelineError>(n)
        })
        .transpose()?;
    let lexicon = match lexicon_path {
        Some(p) => {
            let mut lex = load_lexicon(&p).map_err(|e| data_err(Stage::Correct, &p)(e.to_string()))?;
            lex.protect_schema_values(&schema);
            Some(lex)
        }
        None => None,
    };
    let model_outputs = outputs_path
        .as_deref()
        .map(|p| read_jsonl::<ModelOutput>(p).map_err(data_err(Stage::Decode, p)))
        .transpose()?;
    Ok(Inputs {
        schema,
        corpus,
        noun_db,
        pool,
        lexicon,
        noise,
        model_outputs,
    })
}

/// Writes artifacts into the output directory.
struct Sink<'a> {
    dir: &'a Path,
    written: Vec<PathBuf>,
}

impl Sink<'_> {
    fn write(&mut self, stage: Stage, name: &str, contents: &str) -> Result<(), PipelineError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|source| PipelineError::Write {
            stage,
            path: path.clone(),
            source,
        })?;
        self.written.push(path);
        Ok(())
    }
}

/// Result of a pipeline run.
#[derive(Debug)]
pub struct PipelineOutcome {
    pub report: Option<EvalReport>,
    pub artifacts: Vec<PathBuf>,
}

/// Runs the configured stages on a worker pool of `cfg.workers` threads.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome, PipelineError> {
    cfg.check_stages()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?;
    let inputs = load_inputs(cfg)?;
    pool.install(|| run_loaded(cfg, inputs))
}

fn run_loaded(cfg: &PipelineConfig, inputs: Inputs) -> Result<PipelineOutcome, PipelineError> {
    let Inputs {
        schema,
        mut corpus,
        noun_db,
        pool,
        lexicon,
        noise,
        model_outputs,
    } = inputs;
    let seed = cfg.seed.unwrap_or(0);
    fs::create_dir_all(&cfg.output.dir).map_err(|source| PipelineError::Write {
        stage: Stage::Ingest,
        path: cfg.output.dir.clone(),
        source,
    })?;
    let mut sink = Sink {
        dir: &cfg.output.dir,
        written: Vec::new(),
    };
    let mut variant = cfg.inputs.variant.clone();
    let mut predictions: Option<Vec<PredictionRecord>> = None;
    let mut report = None;
    let options = PromptOptions {
        slot_order_seed: cfg.prompts.shuffle_slots.then_some(seed),
        target_order_seed: cfg.prompts.shuffle_targets.then_some(seed),
    };

    for &stage in &cfg.pipeline.stages {
        match stage {
            Stage::Ingest => {
                sink.write(stage, stage.artifact(), &render_corpus(&corpus))?;
            }
            Stage::Augment => {
                let pool = pool.as_ref().expect("loaded for augment");
                let aug = augment_corpus(&corpus, &schema, pool, cfg.augment.factor, seed).map_err(|e| {
                    PipelineError::Stage {
                        stage,
                        message: e.to_string(),
                    }
                })?;
                let skipped: Vec<Skipped> = aug.iter().flat_map(|a| a.skipped.iter().cloned()).collect();
                corpus = aug.iter().flat_map(|a| a.dialogues().cloned()).collect();
                sink.write(stage, stage.artifact(), &render_corpus(&corpus))?;
                sink.write(stage, AUGMENT_SKIPPED, &skipped_jsonl(&skipped))?;
            }
            Stage::Noise => {
                let noise = noise.as_ref().expect("loaded for noise");
                corpus = corrupt_corpus(&corpus, noise, &cfg.noise.variant).map_err(|e| PipelineError::Stage {
                    stage,
                    message: e.to_string(),
                })?;
                variant = cfg.noise.variant.clone();
                sink.write(stage, stage.artifact(), &render_corpus(&corpus))?;
            }
            Stage::Correct => {
                let target = &cfg.correct.variant;
                if corpus.iter().flat_map(|d| &d.turns).any(|t| t.texts.contains_key(target)) {
                    return Err(PipelineError::Stage {
                        stage,
                        message: format!("variant {target:?} already exists"),
                    });
                }
                corpus = if cfg.correct.use_adapter {
                    let adapter = cfg.adapter.as_ref().expect("checked at load");
                    correct_corpus_with_adapter(&corpus, &variant, target, &adapter.endpoint(), adapter.lanes)
                        .map_err(|e| PipelineError::Adapter {
                            stage,
                            command: adapter.command.join(" "),
                            message: e.to_string(),
                        })?
                } else {
                    correct_corpus(
                        &corpus,
                        &variant,
                        target,
                        lexicon.as_ref(),
                        cfg.thresholds.correction_min_ratio,
                    )
                };
                variant = target.clone();
                sink.write(stage, stage.artifact(), &render_corpus(&corpus))?;
            }
            Stage::Prompts => {
                let records = export_prompts(&corpus, &schema, &variant, options).map_err(|e| PipelineError::Stage {
                    stage,
                    message: e.to_string(),
                })?;
                sink.write(stage, stage.artifact(), &to_jsonl(&records))?;
            }
            Stage::Decode => {
                let keys = turn_keys(&corpus);
                let outputs: Vec<String> = match cfg.decode.source {
                    DecodeSource::Gold => export_prompts(&corpus, &schema, &variant, options)
                        .map_err(|e| PipelineError::Stage {
                            stage,
                            message: e.to_string(),
                        })?
                        .into_iter()
                        .map(|r| r.target_text)
                        .collect(),
                    DecodeSource::File => {
                        let path = cfg.decode.outputs.as_deref().expect("checked at load");
                        let rows = model_outputs.as_ref().expect("loaded for decode");
                        let by_key: HashMap<(&str, usize), &str> = rows
                            .iter()
                            .map(|r| ((r.dialogue_id.as_str(), r.turn_index), r.output.as_str()))
                            .collect();
                        keys.iter()
                            .map(|(id, t)| {
                                by_key.get(&(id.as_str(), *t)).map(|s| s.to_string()).ok_or_else(|| {
                                    data_err(stage, path)(format!("no output for dialogue {id:?} turn {t}"))
                                })
                            })
                            .collect::<Result<_, _>>()?
                    }
                    DecodeSource::Adapter => {
                        let adapter = cfg.adapter.as_ref().expect("checked at load");
                        let prompts = prompt_inputs(&corpus, &schema, &variant, options);
                        adapter_outputs(&adapter.endpoint(), "dst", &prompts, adapter.lanes).map_err(|e| {
                            PipelineError::Adapter {
                                stage,
                                command: adapter.command.join(" "),
                                message: e.to_string(),
                            }
                        })?
                    }
                };
                let records = decode_outputs(&corpus, &schema, &variant, options, &outputs);
                sink.write(stage, stage.artifact(), &to_jsonl(&records))?;
                predictions = Some(records);
            }
            Stage::Postprocess => {
                let db = noun_db.as_ref().expect("loaded for postprocess");
                let records = predictions.as_ref().expect("decode precedes postprocess");
                let (records, log) =
                    postprocess_predictions(records, db, &schema, cfg.thresholds.postprocess_min_ratio);
                sink.write(stage, stage.artifact(), &to_jsonl(&records))?;
                sink.write(stage, RECOVERIES, &recoveries_jsonl(&log))?;
                predictions = Some(records);
            }
            Stage::Eval => {
                let golds = gold_states(&corpus);
                let preds = match &predictions {
                    Some(p) => p.iter().map(|r| r.state.clone()).collect(),
                    None => golds.clone(),
                };
                let r = evaluate(&preds, &golds).map_err(|e| PipelineError::Stage {
                    stage,
                    message: e.to_string(),
                })?;
                sink.write(stage, stage.artifact(), &r.to_json())?;
                sink.write(stage, REPORT_TABLE, &r.render_table())?;
                report = Some(r);
            }
        }
    }
    Ok(PipelineOutcome {
        report,
        artifacts: sink.written,
    })
}
