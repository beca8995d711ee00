use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use dstkit_core::adapter::{conformance_suite, AdapterEndpoint};
use dstkit_core::augment::{augment_corpus, check_consistency};
use dstkit_core::corpus::{load_corpus, load_schema, render_corpus, Dialogue, Schema, TRANSCRIPT};
use dstkit_core::correction::load_lexicon;
use dstkit_core::d3st::PromptOptions;
use dstkit_core::metrics::evaluate;
use dstkit_core::noise::{corrupt_corpus, load_noise_config};
use dstkit_core::pipeline::{
    align_predictions, correct_corpus, correct_corpus_with_adapter, decode_outputs, export_prompts, gold_states,
    postprocess_predictions, prompt_inputs, read_jsonl, recoveries_jsonl, run_pipeline, skipped_jsonl, to_jsonl,
    turn_keys, AdapterFailure, ModelOutput, PipelineConfig, PredictionRecord, Stage, AUGMENT_SKIPPED, RECOVERIES,
    REPORT_TABLE,
};
use dstkit_core::postproc::load_noun_db;

/// Like `print!`/`println!`, but a closed stdout (e.g. `| head`) is not fatal.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($arg)*);
    }};
}
macro_rules! outln {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "dstkit", version, about = "Spoken dialogue state tracking toolkit")]
struct Cli {
    /// Master seed for every seeded stage.
    #[arg(long, global = true, env = "DSTKIT_SEED")]
    seed: Option<u64>,
    /// Worker threads; defaults to the CPU count.
    #[arg(long, global = true, env = "DSTKIT_WORKERS")]
    workers: Option<usize>,
    /// Text variant to read utterances from.
    #[arg(long, global = true, env = "DSTKIT_VARIANT")]
    variant: Option<String>,
    /// Output directory.
    #[arg(long, global = true, env = "DSTKIT_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args)]
struct PromptArgs {
    /// Shuffle slot indices per example.
    #[arg(long)]
    shuffle_slots: bool,
    /// Keep target fragments in index order.
    #[arg(long)]
    fixed_target_order: bool,
}

#[derive(Args)]
struct AdapterArgs {
    /// Adapter command line, split on whitespace.
    #[arg(long)]
    adapter: Option<String>,
    /// Seconds of adapter silence before giving up.
    #[arg(long, default_value_t = 30.0)]
    timeout: f64,
    /// Adapter processes to run side by side.
    #[arg(long, default_value_t = 1)]
    lanes: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus and write it in canonical form.
    Ingest {
        #[command(flatten)]
        input: CorpusArgs,
    },
    /// Value-substitution augmentation.
    Augment {
        #[command(flatten)]
        input: CorpusArgs,
        /// Replacement pool (noun database).
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = 2)]
        factor: usize,
    },
    /// Add a synthetic ASR variant.
    Noise {
        #[command(flatten)]
        input: CorpusArgs,
        #[arg(long)]
        noise_config: PathBuf,
        #[arg(long, default_value = "asr")]
        target_variant: String,
    },
    /// Add a corrected variant.
    Correct {
        #[command(flatten)]
        input: CorpusArgs,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long, default_value_t = 0.8)]
        min_ratio: f64,
        #[arg(long, default_value = "corrected")]
        target_variant: String,
        #[command(flatten)]
        adapter: AdapterArgs,
    },
    /// Export D3ST prompts with gold targets.
    Prompts {
        #[command(flatten)]
        input: CorpusArgs,
        #[command(flatten)]
        prompt: PromptArgs,
    },
    /// Parse model outputs into predicted states.
    Decode {
        #[command(flatten)]
        input: CorpusArgs,
        #[command(flatten)]
        prompt: PromptArgs,
        /// JSONL of {dialogue_id, turn_index, output}.
        #[arg(long, conflicts_with_all = ["adapter", "gold"])]
        outputs: Option<PathBuf>,
        /// Decode the gold targets.
        #[arg(long)]
        gold: bool,
        #[command(flatten)]
        adapter: AdapterArgs,
    },
    /// Recover proper nouns in predictions.
    Postprocess {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        noun_db: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        min_ratio: f64,
    },
    /// Score predictions against gold states.
    Eval {
        #[command(flatten)]
        input: CorpusArgs,
        /// Prediction JSONL; gold states are used when absent.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Run the configured stages end to end.
    Pipeline {
        #[arg(long, env = "DSTKIT_CONFIG")]
        config: PathBuf,
    },
    /// Run the protocol conformance suite against an adapter in echo mode.
    AdapterCheck {
        #[command(flatten)]
        adapter: AdapterArgs,
    },
}

/// An error with its process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

type Outcome<T = ()> = Result<T, Failure>;

trait Classify<T> {
    fn code(self, code: u8) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn code(self, code: u8) -> Outcome<T> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

const USAGE: u8 = 1;
const DATA: u8 = 2;
const ADAPTER: u8 = 3;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn must_exist(path: &Path) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(anyhow!("missing input file {}", path.display())).code(USAGE)
    }
}

fn load(input: &CorpusArgs) -> Outcome<(Schema, Vec<Dialogue>)> {
    must_exist(&input.schema)?;
    must_exist(&input.corpus)?;
    let schema = load_schema(&input.schema).code(DATA)?;
    let corpus = load_corpus(&input.corpus, &schema).code(DATA)?;
    Ok((schema, corpus))
}

struct Ctx {
    seed: Option<u64>,
    variant: String,
    out: PathBuf,
}

impl Ctx {
    fn write(&self, name: &str, contents: &str) -> Outcome {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("cannot create {}", self.out.display()))
            .code(DATA)?;
        let path = self.out.join(name);
        fs::write(&path, contents)
            .with_context(|| format!("cannot write {}", path.display()))
            .code(DATA)?;
        outln!("wrote {}", path.display());
        Ok(())
    }

    fn prompt_options(&self, p: &PromptArgs) -> PromptOptions {
        let seed = self.seed.unwrap_or(0);
        PromptOptions {
            slot_order_seed: p.shuffle_slots.then_some(seed),
            target_order_seed: (!p.fixed_target_order).then_some(seed),
        }
    }
}

fn endpoint(args: &AdapterArgs) -> Outcome<Option<AdapterEndpoint>> {
    let Some(cmd) = &args.adapter else {
        return Ok(None);
    };
    let command: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
    if command.is_empty() {
        return Err(anyhow!("--adapter is empty")).code(USAGE);
    }
    if args.timeout.is_nan() || args.timeout <= 0.0 {
        return Err(anyhow!("--timeout must be positive")).code(USAGE);
    }
    Ok(Some(
        AdapterEndpoint::new(command).with_timeout(Duration::from_secs_f64(args.timeout)),
    ))
}

fn adapter_failure(e: AdapterFailure) -> Failure {
    Failure {
        code: ADAPTER,
        error: e.into(),
    }
}

fn run(cli: Cli) -> Outcome {
    if let Some(w) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .code(USAGE)?;
    }
    let ctx = Ctx {
        seed: cli.seed,
        variant: cli.variant.clone().unwrap_or_else(|| TRANSCRIPT.to_string()),
        out: cli.out.clone().unwrap_or_else(|| PathBuf::from("dstkit-out")),
    };
    match cli.command {
        Command::Ingest { input } => {
            let (_, corpus) = load(&input)?;
            for d in &corpus {
                for v in d.check_cumulative() {
                    eprintln!(
                        "warning: dialogue {} user turn {}: slot {} dropped without being overwritten",
                        v.dialogue, v.user_turn, v.slot
                    );
                }
            }
            let turns: usize = corpus.iter().map(Dialogue::user_turn_count).sum();
            outln!("{} dialogues, {} user turns", corpus.len(), turns);
            ctx.write(Stage::Ingest.artifact(), &render_corpus(&corpus))
        }
        Command::Augment { input, pool, factor } => {
            let (schema, corpus) = load(&input)?;
            must_exist(&pool)?;
            let pool = load_noun_db(&pool).code(DATA)?;
            let aug = augment_corpus(&corpus, &schema, &pool, factor, ctx.seed.unwrap_or(0)).code(USAGE)?;
            let mut violations = 0;
            for (original, a) in corpus.iter().zip(&aug) {
                for v in &a.variants {
                    for bad in check_consistency(original, v) {
                        eprintln!("inconsistent {}: {}", bad.dialogue, bad.message);
                        violations += 1;
                    }
                }
            }
            if violations > 0 {
                return Err(anyhow!("{violations} consistency violations")).code(DATA);
            }
            let out: Vec<Dialogue> = aug.iter().flat_map(|a| a.dialogues().cloned()).collect();
            let skipped: Vec<_> = aug.iter().flat_map(|a| a.skipped.iter().cloned()).collect();
            outln!("{} dialogues from {}", out.len(), corpus.len());
            ctx.write(Stage::Augment.artifact(), &render_corpus(&out))?;
            ctx.write(AUGMENT_SKIPPED, &skipped_jsonl(&skipped))
        }
        Command::Noise {
            input,
            noise_config,
            target_variant,
        } => {
            let (_, corpus) = load(&input)?;
            must_exist(&noise_config)?;
            let mut cfg = load_noise_config(&noise_config).code(DATA)?;
            if let Some(seed) = ctx.seed {
                cfg.seed = seed;
            }
            let out = corrupt_corpus(&corpus, &cfg, &target_variant).code(DATA)?;
            ctx.write(Stage::Noise.artifact(), &render_corpus(&out))
        }
        Command::Correct {
            input,
            lexicon,
            min_ratio,
            target_variant,
            adapter,
        } => {
            let (schema, corpus) = load(&input)?;
            if !(0.0..=1.0).contains(&min_ratio) {
                return Err(anyhow!("--min-ratio must lie in [0, 1]")).code(USAGE);
            }
            let out = match endpoint(&adapter)? {
                Some(ep) => correct_corpus_with_adapter(&corpus, &ctx.variant, &target_variant, &ep, adapter.lanes)
                    .map_err(adapter_failure)?,
                None => {
                    let lex = match &lexicon {
                        Some(p) => {
                            must_exist(p)?;
                            let mut lex = load_lexicon(p).code(DATA)?;
                            lex.protect_schema_values(&schema);
                            Some(lex)
                        }
                        None => None,
                    };
                    correct_corpus(&corpus, &ctx.variant, &target_variant, lex.as_ref(), min_ratio)
                }
            };
            ctx.write(Stage::Correct.artifact(), &render_corpus(&out))
        }
        Command::Prompts { input, prompt } => {
            let (schema, corpus) = load(&input)?;
            let records = export_prompts(&corpus, &schema, &ctx.variant, ctx.prompt_options(&prompt)).code(DATA)?;
            ctx.write(Stage::Prompts.artifact(), &to_jsonl(&records))
        }
        Command::Decode {
            input,
            prompt,
            outputs,
            gold,
            adapter,
        } => {
            let (schema, corpus) = load(&input)?;
            let options = ctx.prompt_options(&prompt);
            let texts: Vec<String> = if let Some(path) = outputs {
                must_exist(&path)?;
                let rows: Vec<ModelOutput> = read_jsonl(&path)
                    .map_err(|e| anyhow!("{}: {e}", path.display()))
                    .code(DATA)?;
                let by_key: std::collections::HashMap<_, _> = rows
                    .iter()
                    .map(|r| ((r.dialogue_id.as_str(), r.turn_index), r.output.as_str()))
                    .collect();
                turn_keys(&corpus)
                    .iter()
                    .map(|(id, t)| {
                        by_key
                            .get(&(id.as_str(), *t))
                            .map(|s| s.to_string())
                            .ok_or_else(|| anyhow!("{}: no output for dialogue {id:?} turn {t}", path.display()))
                    })
                    .collect::<Result<_, _>>()
                    .code(DATA)?
            } else if gold {
                export_prompts(&corpus, &schema, &ctx.variant, options)
                    .code(DATA)?
                    .into_iter()
                    .map(|r| r.target_text)
                    .collect()
            } else if let Some(ep) = endpoint(&adapter)? {
                let prompts = prompt_inputs(&corpus, &schema, &ctx.variant, options);
                let batch = dstkit_core::adapter::run_lanes(&ep, "dst", &prompts, adapter.lanes).code(ADAPTER)?;
                let failed = batch.error_count();
                let total = batch.outputs.len();
                let mut outs = Vec::with_capacity(batch.outputs.len());
                for o in batch.outputs {
                    match o {
                        Ok(s) => outs.push(s),
                        Err(first) => return Err(adapter_failure(AdapterFailure::Items { failed, total, first })),
                    }
                }
                outs
            } else {
                return Err(anyhow!("decode needs one of --outputs, --gold or --adapter")).code(USAGE);
            };
            let records = decode_outputs(&corpus, &schema, &ctx.variant, options, &texts);
            let issues: usize = records.iter().map(|r| r.issues.len()).sum();
            if issues > 0 {
                eprintln!("{issues} parse issues; see the issues field of each record");
            }
            ctx.write(Stage::Decode.artifact(), &to_jsonl(&records))
        }
        Command::Postprocess {
            schema,
            predictions,
            noun_db,
            min_ratio,
        } => {
            for p in [&schema, &predictions, &noun_db] {
                must_exist(p)?;
            }
            if !(0.0..=1.0).contains(&min_ratio) {
                return Err(anyhow!("--min-ratio must lie in [0, 1]")).code(USAGE);
            }
            let schema = load_schema(&schema).code(DATA)?;
            let db = load_noun_db(&noun_db).code(DATA)?;
            db.check_against(&schema).code(DATA)?;
            let records: Vec<PredictionRecord> = read_jsonl(&predictions)
                .map_err(|e| anyhow!("{}: {e}", predictions.display()))
                .code(DATA)?;
            let (records, log) = postprocess_predictions(&records, &db, &schema, min_ratio);
            outln!("{} values recovered", log.len());
            ctx.write(Stage::Postprocess.artifact(), &to_jsonl(&records))?;
            ctx.write(RECOVERIES, &recoveries_jsonl(&log))
        }
        Command::Eval { input, predictions } => {
            let (_, corpus) = load(&input)?;
            let golds = gold_states(&corpus);
            let preds = match &predictions {
                Some(p) => {
                    must_exist(p)?;
                    let records: Vec<PredictionRecord> =
                        read_jsonl(p).map_err(|e| anyhow!("{}: {e}", p.display())).code(DATA)?;
                    align_predictions(&corpus, &records).map_err(|e| anyhow!(e)).code(DATA)?
                }
                None => golds.clone(),
            };
            let report = evaluate(&preds, &golds).code(DATA)?;
            out!("{}", report.render_table());
            ctx.write(Stage::Eval.artifact(), &report.to_json())?;
            ctx.write(REPORT_TABLE, &report.render_table())
        }
        Command::Pipeline { config } => {
            if !config.is_file() {
                return Err(anyhow!("missing config file {}", config.display())).code(USAGE);
            }
            let mut cfg = PipelineConfig::load(&config).code(USAGE)?;
            if cli.seed.is_some() {
                cfg.seed = cli.seed;
            }
            if let Some(w) = cli.workers {
                cfg.workers = w;
            }
            if let Some(v) = cli.variant {
                cfg.inputs.variant = v;
            }
            if let Some(o) = cli.out {
                cfg.output.dir = o;
            }
            match run_pipeline(&cfg) {
                Ok(outcome) => {
                    for a in &outcome.artifacts {
                        outln!("wrote {}", a.display());
                    }
                    if let Some(r) = outcome.report {
                        out!("{}", r.render_table());
                    }
                    Ok(())
                }
                Err(e) => Err(Failure {
                    code: e.exit_code(),
                    error: e.into(),
                }),
            }
        }
        Command::AdapterCheck { adapter } => {
            let Some(ep) = endpoint(&adapter)? else {
                return Err(anyhow!("adapter-check needs --adapter")).code(USAGE);
            };
            let checks = conformance_suite(&ep).code(ADAPTER)?;
            let mut failed = 0;
            for c in &checks {
                outln!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                return Err(anyhow!("{failed} of {} checks failed", checks.len())).code(ADAPTER);
            }
            Ok(())
        }
    }
}
