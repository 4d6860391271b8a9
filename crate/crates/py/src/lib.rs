//! Python bindings. Structured results cross the boundary as plain
//! dicts and lists (serialized through the `json` module).

use std::path::Path;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use toolrl_core::eval::{self, PredictionRun, ReportFormat};
use toolrl_core::grammar::{self, Segment, SegmentKind, Termination, Trajectory};
use toolrl_core::grpo::{self, GrpoConfig, PolicyParams, ToyEnv, TOY_STATES};
use toolrl_core::mat::{self, Manifest, Plan, SourceItem};
use toolrl_core::reward::{self, AnswerKey, TermFrequencyEmbedder};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let s = serde_json::to_string(v).map_err(err)?;
    Ok(py.import("json")?.call_method1("loads", (s,))?.unbind())
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let s: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&s).map_err(err)
}

fn kind(tag: &str) -> PyResult<SegmentKind> {
    SegmentKind::ALL
        .iter()
        .copied()
        .find(|k| k.tag() == tag)
        .ok_or_else(|| err(format!("unknown segment kind {tag:?}")))
}

fn plan(spec: &str) -> PyResult<Plan> {
    match spec {
        "test" => Ok(Plan::test_default()),
        "train" => Ok(Plan::train_default()),
        path => Plan::load(Path::new(path)).map_err(err),
    }
}

/// Parses one model turn into `{segments, stray_text, unclosed, valid}`.
#[pyfunction]
fn parse_turn(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    to_py(py, &grammar::parse_turn(text))
}

/// Renders `[(kind, body), ...]` back to tagged text.
#[pyfunction]
fn render_turn(segments: Vec<(String, String)>) -> PyResult<String> {
    let segs = segments
        .into_iter()
        .map(|(k, b)| Ok(Segment::new(kind(&k)?, b)))
        .collect::<PyResult<Vec<_>>>()?;
    grammar::render_turn(&segs).map_err(err)
}

#[pyfunction]
fn f1_score(pred: &str, golds: Vec<String>) -> f64 {
    reward::f1_score(pred, &golds)
}

#[pyfunction]
fn exact_match(pred: &str, golds: Vec<String>) -> u8 {
    reward::exact_match(pred, &golds)
}

/// Reward breakdown for raw model turns, scored with term-frequency
/// similarity.
#[pyfunction]
#[pyo3(signature = (turns, terminated_by, gold_answers, reference_queries = Vec::new()))]
fn total_reward(
    py: Python<'_>,
    turns: Vec<String>,
    terminated_by: &Bound<'_, PyAny>,
    gold_answers: Vec<String>,
    reference_queries: Vec<String>,
) -> PyResult<Py<PyAny>> {
    let traj = Trajectory {
        turns: turns.iter().map(|t| grammar::parse_turn(t)).collect(),
        terminated_by: from_py::<Termination>(terminated_by)?,
    };
    let key = AnswerKey {
        gold_answers,
        reference_queries,
    };
    to_py(py, &reward::total_reward(&traj, &key, &TermFrequencyEmbedder))
}

#[pyfunction]
#[pyo3(signature = (rewards, eps_std = 1e-6))]
fn group_advantages(rewards: Vec<f64>, eps_std: f64) -> PyResult<Vec<f64>> {
    grpo::group_advantages(&rewards, eps_std).map_err(err)
}

#[pyfunction]
fn kl_penalty(logp_theta: f64, logp_ref: f64) -> f64 {
    grpo::kl_penalty(logp_theta, logp_ref)
}

/// Weighted mean of `[(value, count), ...]`.
#[pyfunction]
fn weighted_mean(parts: Vec<(f64, usize)>) -> f64 {
    eval::weighted_mean(&parts)
}

#[pyfunction]
fn round2(x: f64) -> String {
    eval::round2(x)
}

/// Scores a predictions file against a manifest; returns the metric report.
#[pyfunction]
fn score_run(py: Python<'_>, manifest: &str, predictions: &str) -> PyResult<Py<PyAny>> {
    let m = Manifest::load(Path::new(manifest)).map_err(err)?;
    let run = PredictionRun::load(Path::new(predictions)).map_err(err)?;
    to_py(py, &eval::score_run(&run, &m).map_err(err)?)
}

/// The report rendered as `plain`, `csv` or `json`.
#[pyfunction]
#[pyo3(signature = (manifest, predictions, format = "plain"))]
fn render_report(manifest: &str, predictions: &str, format: &str) -> PyResult<String> {
    let fmt = match format {
        "plain" => ReportFormat::Plain,
        "csv" => ReportFormat::Csv,
        "json" => ReportFormat::Json,
        other => return Err(err(format!("unknown format {other:?}"))),
    };
    let m = Manifest::load(Path::new(manifest)).map_err(err)?;
    let run = PredictionRun::load(Path::new(predictions)).map_err(err)?;
    Ok(eval::render_report(&eval::score_run(&run, &m).map_err(err)?, fmt))
}

/// Builds a coding benchmark from a sources JSONL; returns the number of
/// items and the ids whose image came out unchanged.
#[pyfunction]
#[pyo3(signature = (sources, out_dir, plan_spec = "test", master_seed = 0))]
fn build_coding_bench(sources: &str, out_dir: &str, plan_spec: &str, master_seed: u64) -> PyResult<(usize, Vec<String>)> {
    let path = Path::new(sources);
    let items: Vec<SourceItem> = mat::read_jsonl(path).map_err(err)?;
    let root = path.parent().unwrap_or(Path::new(""));
    let summary = mat::build_coding_bench(&items, root, &plan(plan_spec)?, master_seed, Path::new(out_dir)).map_err(err)?;
    Ok((summary.manifest.items.len(), summary.unchanged))
}

/// Validation findings as strings; empty when the manifest is sound.
#[pyfunction]
#[pyo3(signature = (manifest, plan_spec = None, check_files = true))]
fn validate_manifest(manifest: &str, plan_spec: Option<&str>, check_files: bool) -> PyResult<Vec<String>> {
    let path = Path::new(manifest);
    let m = Manifest::load(path).map_err(err)?;
    let p = plan_spec.map(plan).transpose()?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(mat::validate_manifest(&m, check_files.then_some(base), p.as_ref())
        .iter()
        .map(|f| f.to_string())
        .collect())
}

/// Trains the toy policy from uniform; `config` overrides GRPO defaults.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn train_toy(py: Python<'_>, config: Option<&Bound<'_, PyAny>>) -> PyResult<Py<PyAny>> {
    let cfg: GrpoConfig = match config {
        Some(c) => from_py(c)?,
        None => GrpoConfig::default(),
    };
    let env = ToyEnv::default();
    let res = grpo::train_toy(&env, PolicyParams::uniform(TOY_STATES, env.vocab), &cfg, None).map_err(err)?;
    let out = serde_json::json!({
        "oracle_reward": res.oracle_reward,
        "log": res.log,
        "logits": res.policy.logits,
    });
    to_py(py, &out)
}

/// A loaded benchmark manifest.
#[pyclass(name = "Manifest", frozen)]
struct PyManifest {
    inner: Manifest,
}

#[pymethods]
impl PyManifest {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Manifest::load(Path::new(path)).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.items.len()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.items.iter().map(|i| i.id.clone()).collect()
    }

    fn item(&self, py: Python<'_>, id: &str) -> PyResult<Py<PyAny>> {
        let it = self.inner.get(id).ok_or_else(|| err(format!("no item {id:?}")))?;
        to_py(py, it)
    }
}

#[pymodule]
fn toolrl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(parse_turn, m)?)?;
    m.add_function(wrap_pyfunction!(render_turn, m)?)?;
    m.add_function(wrap_pyfunction!(f1_score, m)?)?;
    m.add_function(wrap_pyfunction!(exact_match, m)?)?;
    m.add_function(wrap_pyfunction!(total_reward, m)?)?;
    m.add_function(wrap_pyfunction!(group_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(kl_penalty, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_mean, m)?)?;
    m.add_function(wrap_pyfunction!(round2, m)?)?;
    m.add_function(wrap_pyfunction!(score_run, m)?)?;
    m.add_function(wrap_pyfunction!(render_report, m)?)?;
    m.add_function(wrap_pyfunction!(build_coding_bench, m)?)?;
    m.add_function(wrap_pyfunction!(validate_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    m.add_class::<PyManifest>()?;
    Ok(())
}
