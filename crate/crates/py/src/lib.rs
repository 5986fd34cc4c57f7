//! Python bindings: datasets, prompt assembly, scoring helpers, metrics, and
//! the experiment commands.

use std::path::PathBuf;

use memeprompt_core::augment::{compose_description as compose, Variant};
use memeprompt_core::corpus::{self, split_stats};
use memeprompt_core::ensemble;
use memeprompt_core::experiment::{self, ExperimentConfig, ExperimentError, Overrides};
use memeprompt_core::metrics::{self, EvalResult};
use memeprompt_core::prompt::{assemble_prompt as assemble, MemeText, PromptError, SpecialTokens};
use memeprompt_core::scorer;
use memeprompt_core::synthetic::{self, SyntheticSpec};
use memeprompt_core::{Label, MemeRecord, Split, Template};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn experiment_err(e: ExperimentError) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn label(value: u8) -> PyResult<Label> {
    Label::from_index(value as u64).ok_or_else(|| value_err(format!("label must be 0 or 1, got {value}")))
}

fn template(name: &str) -> PyResult<Template> {
    match name {
        "plain" => Ok(Template::label_only()),
        "target" => Ok(Template::with_target()),
        custom => Template::parse(custom).map_err(value_err),
    }
}

#[pyclass(name = "LabelWordPair", frozen, from_py_object)]
#[derive(Clone)]
struct PyLabelWordPair(memeprompt_core::LabelWordPair);

#[pymethods]
impl PyLabelWordPair {
    #[new]
    #[pyo3(signature = (pos_word = "good", neg_word = "bad"))]
    fn new(pos_word: &str, neg_word: &str) -> PyResult<Self> {
        memeprompt_core::LabelWordPair::new(pos_word, neg_word)
            .map(Self)
            .map_err(value_err)
    }

    #[getter]
    fn pos_word(&self) -> &str {
        &self.0.pos_word
    }

    #[getter]
    fn neg_word(&self) -> &str {
        &self.0.neg_word
    }

    fn swapped(&self) -> Self {
        Self(self.0.swapped())
    }

    fn __repr__(&self) -> String {
        format!("LabelWordPair({:?}, {:?})", self.0.pos_word, self.0.neg_word)
    }
}

/// Normalized probabilities of the non-hateful (y0) and hateful (y1) words.
#[pyclass(name = "ScoreVector", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyScoreVector(memeprompt_core::ScoreVector);

#[pymethods]
impl PyScoreVector {
    #[new]
    fn new(y0: f64, y1: f64) -> Self {
        Self(memeprompt_core::ScoreVector { y0, y1 })
    }

    /// Two-way softmax over the label-word logits.
    #[staticmethod]
    fn from_logits(pos_logit: f64, neg_logit: f64) -> Self {
        Self(memeprompt_core::ScoreVector::from_logits(pos_logit, neg_logit))
    }

    #[getter]
    fn y0(&self) -> f64 {
        self.0.y0
    }

    #[getter]
    fn y1(&self) -> f64 {
        self.0.y1
    }

    /// 1 for hateful, 0 for non-hateful.
    fn predicted(&self) -> u8 {
        scorer::predict(&self.0).index() as u8
    }

    fn swapped(&self) -> Self {
        Self(self.0.swapped())
    }

    fn __repr__(&self) -> String {
        format!("ScoreVector(y0={}, y1={})", self.0.y0, self.0.y1)
    }
}

fn record_dict<'py>(py: Python<'py>, r: &MemeRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("id", &r.id)?;
    d.set_item("split", r.split.to_string())?;
    d.set_item("label", r.label.index())?;
    d.set_item("meme_text", &r.meme_text)?;
    d.set_item("caption", &r.caption)?;
    d.set_item("entities", &r.entities)?;
    d.set_item("demographics", &r.demographics)?;
    d.set_item("target", &r.target)?;
    Ok(d)
}

#[pyclass(name = "Dataset", frozen)]
struct PyDataset(memeprompt_core::Dataset);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (path, target_vocabulary = None))]
    fn load(path: PathBuf, target_vocabulary: Option<Vec<String>>) -> PyResult<Self> {
        corpus::load_jsonl_with_targets(path, target_vocabulary)
            .map(Self)
            .map_err(value_err)
    }

    /// Separable corpus where a trigger word marks hateful memes.
    #[staticmethod]
    #[pyo3(signature = (train_per_class = 100, test_per_class = 50, seed = 0))]
    fn synthetic(train_per_class: usize, test_per_class: usize, seed: u64) -> Self {
        Self(synthetic::generate(&SyntheticSpec {
            train_per_class,
            test_per_class,
            seed,
            ..Default::default()
        }))
    }

    #[getter]
    fn name(&self) -> &str {
        &self.0.name
    }

    fn __len__(&self) -> usize {
        self.0.records.len()
    }

    /// `{"train": {"hateful": .., "non_hateful": ..}, "test": {...}}`
    fn split_stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let stats = split_stats(&self.0);
        let out = PyDict::new(py);
        for (name, counts) in [("train", stats.train), ("test", stats.test)] {
            let d = PyDict::new(py);
            d.set_item("hateful", counts.hateful)?;
            d.set_item("non_hateful", counts.non_hateful)?;
            out.set_item(name, d)?;
        }
        Ok(out)
    }

    fn kshot(&self, k: usize, seed: u64) -> PyResult<Self> {
        corpus::kshot_subsample(&self.0, k, seed).map(Self).map_err(value_err)
    }

    fn fraction(&self, frac: f64, seed: u64) -> PyResult<Self> {
        corpus::fraction_subsample(&self.0, frac, seed).map(Self).map_err(value_err)
    }

    /// Record ids, optionally restricted to "train" or "test".
    #[pyo3(signature = (split = None))]
    fn ids(&self, split: Option<&str>) -> PyResult<Vec<String>> {
        let wanted = match split {
            None => None,
            Some("train") => Some(Split::Train),
            Some("test") => Some(Split::Test),
            Some(other) => return Err(value_err(format!("unknown split {other:?}"))),
        };
        Ok(self
            .0
            .records
            .iter()
            .filter(|r| wanted.is_none_or(|s| r.split == s))
            .map(|r| r.id.clone())
            .collect())
    }

    fn record<'py>(&self, py: Python<'py>, id: &str) -> PyResult<Bound<'py, PyDict>> {
        let r = self
            .0
            .get(id)
            .ok_or_else(|| value_err(format!("no record {id:?}")))?;
        record_dict(py, r)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        corpus::write_jsonl(&self.0.records, path).map_err(value_err)
    }
}

/// Image description: the caption, plus entity and demographic clauses for "det".
#[pyfunction]
#[pyo3(signature = (caption, entities = Vec::new(), demographics = Vec::new(), variant = "det"))]
fn compose_description(
    caption: String,
    entities: Vec<String>,
    demographics: Vec<String>,
    variant: &str,
) -> PyResult<String> {
    let variant: Variant = variant.parse().map_err(value_err)?;
    let rec = MemeRecord {
        id: "x".into(),
        split: Split::Test,
        label: Label::NonHateful,
        meme_text: "x".into(),
        caption,
        entities,
        demographics,
        target: None,
    };
    Ok(compose(&rec, variant))
}

/// Serialized prompt. `demos` is `(pos_text, pos_desc, neg_text, neg_desc,
/// neg_target)`; `template` is "plain", "target", or a custom `{W}` template.
#[pyfunction]
#[pyo3(signature = (infer_text, infer_desc, demos = None, label_words = None, template = "plain"))]
fn assemble_prompt(
    infer_text: &str,
    infer_desc: &str,
    demos: Option<(String, String, String, String, Option<String>)>,
    label_words: Option<PyLabelWordPair>,
    template: &str,
) -> PyResult<String> {
    let tpl = self::template(template)?;
    let words = label_words.map(|w| w.0).unwrap_or_default();
    let demo_texts = demos.as_ref().map(|(pt, pd, nt, nd, target)| {
        (
            MemeText { id: "pos", text: pt, desc: pd, target: None },
            MemeText { id: "neg", text: nt, desc: nd, target: target.as_deref() },
        )
    });
    let infer = MemeText { id: "infer", text: infer_text, desc: infer_desc, target: None };
    let prompt = assemble(infer, demo_texts, &words, &tpl).map_err(|e: PromptError| value_err(e))?;
    Ok(prompt.serialize(&SpecialTokens::default()))
}

/// −ln p(gold), with the probability floored to avoid infinities.
#[pyfunction]
fn training_loss(score: PyScoreVector, gold: u8) -> PyResult<f64> {
    Ok(scorer::training_loss(&score.0, label(gold)?))
}

/// Gradient of the loss with respect to (pos_logit, neg_logit).
#[pyfunction]
fn loss_gradient(pos_logit: f64, neg_logit: f64, gold: u8) -> PyResult<(f64, f64)> {
    let [g0, g1] = scorer::loss_gradient(pos_logit, neg_logit, label(gold)?);
    Ok((g0, g1))
}

#[pyfunction]
fn average_scores(scores: Vec<PyScoreVector>) -> PyResult<PyScoreVector> {
    let raw: Vec<_> = scores.iter().map(|s| s.0).collect();
    ensemble::average_scores(&raw)
        .map(PyScoreVector)
        .ok_or_else(|| value_err("need at least one score"))
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    let labels: Vec<Label> = labels.into_iter().map(label).collect::<PyResult<_>>()?;
    metrics::auroc(&scores, &labels).map_err(value_err)
}

#[pyfunction]
fn accuracy(preds: Vec<u8>, labels: Vec<u8>) -> PyResult<f64> {
    let preds: Vec<Label> = preds.into_iter().map(label).collect::<PyResult<_>>()?;
    let labels: Vec<Label> = labels.into_iter().map(label).collect::<PyResult<_>>()?;
    metrics::accuracy(&preds, &labels).map_err(value_err)
}

fn run_dict<'py>(py: Python<'py>, r: &metrics::RunResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mean_auroc", r.mean_auroc)?;
    d.set_item("std_auroc", r.std_auroc)?;
    d.set_item("mean_acc", r.mean_acc)?;
    d.set_item("std_acc", r.std_acc)?;
    d.set_item("std_kind", &r.std_kind)?;
    d.set_item("single_seed", r.single_seed)?;
    d.set_item("config_hash", &r.config_hash)?;
    let seeds: Vec<(u64, f64, f64)> = r.per_seed.iter().map(|e| (e.seed, e.auroc, e.accuracy)).collect();
    d.set_item("per_seed", seeds)?;
    Ok(d)
}

/// Mean and population std over `(auroc, accuracy, n, seed)` tuples.
#[pyfunction]
fn aggregate_seeds<'py>(py: Python<'py>, results: Vec<(f64, f64, usize, u64)>) -> PyResult<Bound<'py, PyDict>> {
    let evals: Vec<EvalResult> = results
        .into_iter()
        .map(|(auroc, accuracy, n, seed)| EvalResult { auroc, accuracy, n, seed })
        .collect();
    let r = metrics::aggregate_seeds(&evals).ok_or_else(|| value_err("need at least one result"))?;
    run_dict(py, &r)
}

/// Runs `train-eval` from a TOML config. Returns the aggregate plus `run_dir`.
#[pyfunction]
#[pyo3(signature = (config, out, seeds = None))]
fn train_eval<'py>(
    py: Python<'py>,
    config: PathBuf,
    out: PathBuf,
    seeds: Option<Vec<u64>>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = ExperimentConfig::from_file(&config).map_err(experiment_err)?;
    Overrides { seeds, ..Default::default() }.apply(&mut cfg);
    let report = py
        .detach(|| experiment::cmd_train_eval(&cfg, &out))
        .map_err(experiment_err)?;
    let d = run_dict(py, &report.row.result)?;
    d.set_item("run_dir", report.run_dir)?;
    Ok(d)
}

#[pymodule]
fn memeprompt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLabelWordPair>()?;
    m.add_class::<PyScoreVector>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(compose_description, m)?)?;
    m.add_function(wrap_pyfunction!(assemble_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(training_loss, m)?)?;
    m.add_function(wrap_pyfunction!(loss_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(average_scores, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_seeds, m)?)?;
    m.add_function(wrap_pyfunction!(train_eval, m)?)?;
    Ok(())
}
