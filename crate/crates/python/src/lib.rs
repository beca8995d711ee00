//! Python bindings. States cross the boundary as `dict[str, str]`.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use dstkit_core::corpus::{self, DialogueState, Speaker};
use dstkit_core::{correction, d3st, metrics, noise, pipeline, postproc, text};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_state(d: BTreeMap<String, String>) -> DialogueState {
    d.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect()
}

fn from_state(s: &DialogueState) -> BTreeMap<String, String> {
    s.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn json_to_py<'py>(py: Python<'py>, json: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (json,))
}

#[pyfunction]
fn levenshtein_distance(a: &str, b: &str) -> usize {
    postproc::levenshtein_distance(a, b)
}

#[pyfunction]
fn similarity_ratio(a: &str, b: &str) -> f64 {
    postproc::similarity_ratio(a, b)
}

#[pyfunction]
fn canonicalize(s: &str) -> String {
    text::canonicalize(s)
}

#[pyclass(frozen, module = "dstkit")]
struct Schema {
    inner: corpus::Schema,
}

#[pymethods]
impl Schema {
    #[staticmethod]
    fn parse(source: &str) -> PyResult<Self> {
        corpus::parse_schema(source).map(|inner| Self { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        corpus::load_schema(path)
            .map(|inner| Self { inner })
            .map_err(|e| match e {
                corpus::SchemaError::Io { .. } => PyIOError::new_err(e.to_string()),
                other => value_err(other),
            })
    }

    fn slot_names(&self) -> Vec<String> {
        self.inner.slots().iter().map(|s| s.name.clone()).collect()
    }

    /// Option list of a categorical slot, `None` for open slots.
    fn values(&self, slot: &str) -> PyResult<Option<Vec<String>>> {
        let def = self
            .inner
            .get(slot)
            .ok_or_else(|| PyValueError::new_err(format!("unknown slot {slot:?}")))?;
        Ok(def.is_categorical().then(|| def.values.clone()))
    }

    fn render(&self) -> String {
        self.inner.render()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(frozen, module = "dstkit")]
struct Dialogue {
    inner: corpus::Dialogue,
}

#[pymethods]
impl Dialogue {
    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    fn user_turn_count(&self) -> usize {
        self.inner.user_turn_count()
    }

    fn state_at_turn(&self, index: usize) -> PyResult<BTreeMap<String, String>> {
        self.inner.state_at_turn(index).map(from_state).map_err(value_err)
    }

    fn gold_states(&self) -> Vec<BTreeMap<String, String>> {
        self.inner.gold_states().iter().map(from_state).collect()
    }

    /// `(speaker, text)` for every turn, read from `variant`.
    #[pyo3(signature = (variant = "transcript"))]
    fn turns(&self, variant: &str) -> Vec<(String, String)> {
        self.inner
            .turns
            .iter()
            .map(|t| (t.speaker.to_string(), t.text_or_transcript(variant).to_string()))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("Dialogue(id={:?}, turns={})", self.inner.id, self.inner.turns.len())
    }
}

#[pyfunction]
fn load_corpus(path: &str, schema: &Schema) -> PyResult<Vec<Dialogue>> {
    let dialogues = corpus::load_corpus(path, &schema.inner).map_err(|e| match e {
        corpus::CorpusError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => value_err(other),
    })?;
    Ok(dialogues.into_iter().map(|inner| Dialogue { inner }).collect())
}

#[pyclass(frozen, module = "dstkit")]
struct Prompt {
    inner: d3st::PromptExample,
}

#[pymethods]
impl Prompt {
    #[getter]
    fn input_text(&self) -> &str {
        &self.inner.input_text
    }

    #[getter]
    fn slot_index_map(&self) -> Vec<String> {
        self.inner.slot_index_map.clone()
    }
}

fn speaker(name: &str) -> PyResult<Speaker> {
    match name {
        "user" => Ok(Speaker::User),
        "system" => Ok(Speaker::System),
        other => Err(PyValueError::new_err(format!("unknown speaker {other:?}"))),
    }
}

#[pyfunction]
#[pyo3(signature = (schema, history, slot_order_seed = None))]
fn build_prompt(schema: &Schema, history: Vec<(String, String)>, slot_order_seed: Option<u64>) -> PyResult<Prompt> {
    let turns = history
        .iter()
        .map(|(s, t)| Ok((speaker(s)?, t.as_str())))
        .collect::<PyResult<Vec<_>>>()?;
    Ok(Prompt {
        inner: d3st::build_prompt(&schema.inner, &turns, slot_order_seed),
    })
}

#[pyfunction]
#[pyo3(signature = (state, prompt, order_seed = None))]
fn build_target(state: BTreeMap<String, String>, prompt: &Prompt, order_seed: Option<u64>) -> PyResult<String> {
    d3st::build_target(&to_state(state), &prompt.inner, order_seed).map_err(value_err)
}

/// Returns the parsed state and the issues found, as strings.
#[pyfunction]
fn parse_state_string(
    output: &str,
    prompt: &Prompt,
    schema: &Schema,
) -> (BTreeMap<String, String>, Vec<String>) {
    let (state, issues) = d3st::parse_state_string(output, &prompt.inner, &schema.inner);
    (from_state(&state), issues.iter().map(|i| i.to_string()).collect())
}

#[pyfunction]
#[pyo3(signature = (text, strip_special_chars = 0.0, spell_out_times = 0.0, word_confusion = 0.0, seed = 0, stream_key = ""))]
fn corrupt_utterance(
    text: &str,
    strip_special_chars: f64,
    spell_out_times: f64,
    word_confusion: f64,
    seed: u64,
    stream_key: &str,
) -> PyResult<String> {
    let cfg = noise::NoiseConfig {
        strip_special_chars,
        spell_out_times,
        word_confusion,
        seed,
        ..Default::default()
    };
    cfg.validate().map_err(value_err)?;
    Ok(noise::corrupt_utterance(text, &cfg, stream_key))
}

#[pyfunction]
fn normalize_format(text: &str) -> String {
    correction::normalize_format(text)
}

#[pyfunction]
#[pyo3(signature = (text, lexicon = None, min_ratio = 0.8))]
fn correct_text(text: &str, lexicon: Option<Vec<String>>, min_ratio: f64) -> String {
    let lex = lexicon.map(|words| {
        let mut lex = correction::Lexicon::new();
        for w in &words {
            lex.insert(w);
        }
        lex
    });
    correction::correct_text(text, lex.as_ref(), min_ratio)
}

#[pyfunction]
#[pyo3(signature = (pairs, strip_special_chars = false))]
fn sentence_error_rate(pairs: Vec<(String, String)>, strip_special_chars: bool) -> PyResult<f64> {
    correction::sentence_error_rate(&pairs, strip_special_chars)
        .map(|r| r.sentence_error_rate)
        .map_err(value_err)
}

/// `db` maps slot names to their canonical values.
#[pyfunction]
#[pyo3(signature = (slot, value, db, min_ratio = 0.8))]
fn recover_value(slot: &str, value: &str, db: BTreeMap<String, Vec<String>>, min_ratio: f64) -> (String, bool) {
    let db: postproc::NounDatabase = db
        .iter()
        .flat_map(|(s, vs)| vs.iter().map(move |v| (s.as_str(), v.as_str())))
        .collect();
    postproc::recover_value(slot, value, &db, min_ratio)
}

/// Full evaluation report as a dict.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    predictions: Vec<BTreeMap<String, String>>,
    golds: Vec<BTreeMap<String, String>>,
) -> PyResult<Bound<'py, PyAny>> {
    let preds: Vec<_> = predictions.into_iter().map(to_state).collect();
    let golds: Vec<_> = golds.into_iter().map(to_state).collect();
    let report = metrics::evaluate(&preds, &golds).map_err(value_err)?;
    json_to_py(py, &report.to_json())
}

/// Runs a pipeline config; returns the report dict when eval ran.
#[pyfunction]
fn run_pipeline<'py>(py: Python<'py>, config_path: &str) -> PyResult<Option<Bound<'py, PyAny>>> {
    let cfg = pipeline::PipelineConfig::load(config_path).map_err(value_err)?;
    let outcome = pipeline::run_pipeline(&cfg).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    outcome.report.map(|r| json_to_py(py, &r.to_json())).transpose()
}

#[pymodule]
fn dstkit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Schema>()?;
    m.add_class::<Dialogue>()?;
    m.add_class::<Prompt>()?;
    m.add_function(wrap_pyfunction!(levenshtein_distance, m)?)?;
    m.add_function(wrap_pyfunction!(similarity_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(canonicalize, m)?)?;
    m.add_function(wrap_pyfunction!(load_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(build_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(build_target, m)?)?;
    m.add_function(wrap_pyfunction!(parse_state_string, m)?)?;
    m.add_function(wrap_pyfunction!(corrupt_utterance, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_format, m)?)?;
    m.add_function(wrap_pyfunction!(correct_text, m)?)?;
    m.add_function(wrap_pyfunction!(sentence_error_rate, m)?)?;
    m.add_function(wrap_pyfunction!(recover_value, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add("METRICS_VERSION", metrics::METRICS_VERSION)?;
    Ok(())
}
