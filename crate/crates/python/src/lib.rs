//! Python bindings: text featurisation, the bag-of-embeddings classifier,
//! metrics, synthetic corpora, prompt rendering and the command line.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use xlmh_core as core;
use core::classifier::{fine_tune, Architecture, ModelMeta, TextClassifier, TrainConfig};
use core::error::{Error, ErrorKind};
use core::eval::{make_synthetic_pair, SyntheticConfig};
use core::icl::{build_strategy_prompt, render_zero_shot, OverlapScorer, PromptLibrary, PromptMode, Strategy};
use core::textdata::{Example, TaskSpec};

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.kind() {
        ErrorKind::Config => PyValueError::new_err(msg),
        ErrorKind::Data => PyIOError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn examples(texts: &[String], labels: Option<&[usize]>) -> PyResult<Vec<Example>> {
    if let Some(l) = labels {
        if l.len() != texts.len() {
            return Err(PyValueError::new_err(format!("{} texts but {} labels", texts.len(), l.len())));
        }
    }
    Ok(texts
        .iter()
        .enumerate()
        .map(|(i, t)| Example::new(format!("py-{i}"), t.clone(), labels.map_or(0, |l| l[i]), "und"))
        .collect())
}

/// Lower-cased word tokens.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    core::textdata::tokenize(text)
}

/// Hashed token ids of `text` for a power-of-two vocabulary.
#[pyfunction]
fn featurize(text: &str, vocab_size: usize) -> PyResult<Vec<usize>> {
    Ok(core::textdata::featurize_text(text, vocab_size).map_err(to_py)?.token_ids)
}

#[pyfunction]
fn fnv1a64(text: &str) -> u64 {
    core::textdata::fnv1a64(text.as_bytes())
}

#[pyfunction]
#[pyo3(signature = (predictions, golds, n_classes))]
fn macro_f1(predictions: Vec<Option<usize>>, golds: Vec<usize>, n_classes: usize) -> PyResult<f64> {
    core::eval::macro_f1(&predictions, &golds, n_classes).map_err(to_py)
}

#[pyfunction]
fn accuracy(predictions: Vec<Option<usize>>, golds: Vec<usize>) -> PyResult<f64> {
    core::eval::accuracy(&predictions, &golds).map_err(to_py)
}

#[pyfunction]
fn label_names(task_id: u8) -> PyResult<Vec<String>> {
    Ok(TaskSpec::by_id(task_id).map_err(to_py)?.label_names)
}

/// Runs the command line with `args` (without the program name); returns the exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    core::cli::main_with_args(std::iter::once("xlmh".to_owned()).chain(args))
}

/// Source and translated synthetic corpora as lists of (text, label) pairs.
#[pyfunction]
#[pyo3(signature = (docs_per_class=50, vocab_size=400, margin=0.8, shared_fraction=0.0, seed=0))]
fn synthetic_pair(
    docs_per_class: usize,
    vocab_size: usize,
    margin: f64,
    shared_fraction: f64,
    seed: u64,
) -> PyResult<(Vec<(String, usize)>, Vec<(String, usize)>)> {
    let cfg = SyntheticConfig {
        docs_per_class,
        vocab_size,
        margin,
        shared_fraction,
        seed,
        ..SyntheticConfig::default()
    };
    let (_, src, tgt) = make_synthetic_pair(&cfg, "en", "sw").map_err(to_py)?;
    let pairs = |c: &core::textdata::Corpus| c.examples.iter().map(|e| (e.text.clone(), e.label)).collect();
    Ok((pairs(&src), pairs(&tgt)))
}

/// Zero-shot candidate prompts for a post, one per label, from the built-in prompt files.
#[pyfunction]
#[pyo3(signature = (task_id, text, strategy="english"))]
fn render_prompts(task_id: u8, text: &str, strategy: &str) -> PyResult<Vec<String>> {
    let strategy = match strategy {
        "swahili" => Strategy::Swahili,
        "cross-lingual" => Strategy::CrossLingual,
        "english" => Strategy::English,
        other => return Err(PyValueError::new_err(format!("unknown strategy {other:?}"))),
    };
    let task = TaskSpec::by_id(task_id).map_err(to_py)?;
    let (prompt, _) =
        build_strategy_prompt(&PromptLibrary::Builtin, &task, strategy, PromptMode::ExamplesOnly, "\n\n").map_err(to_py)?;
    let x = Example::new("py-0", text, 0, strategy.example_language());
    Ok(render_zero_shot(&prompt, &x).map_err(to_py)?.into_iter().map(|r| r.text).collect())
}

/// Token-overlap score of `candidate` against `prompt`.
#[pyfunction]
fn overlap_score(prompt: &str, candidate: &str) -> usize {
    OverlapScorer::overlap(prompt, candidate)
}

/// Bag-of-embeddings text classifier.
#[pyclass(name = "TextClassifier", module = "xlmh", from_py_object)]
#[derive(Clone)]
struct PyTextClassifier {
    inner: TextClassifier,
}

#[pymethods]
impl PyTextClassifier {
    #[new]
    #[pyo3(signature = (num_classes, vocab_size=1 << 15, dim=64, seed=0))]
    fn new(num_classes: usize, vocab_size: usize, dim: usize, seed: u64) -> PyResult<Self> {
        let arch = Architecture {
            vocab_size,
            dim,
            num_classes,
        };
        Ok(Self {
            inner: TextClassifier::new(arch, seed).map_err(to_py)?,
        })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.arch.num_classes
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.arch.vocab_size
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.arch.dim
    }

    fn logits(&self, texts: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        let t = self.inner.forward_logits(&examples(&texts, None)?).map_err(to_py)?;
        Ok(t.data().chunks(self.inner.arch.num_classes).map(<[f64]>::to_vec).collect())
    }

    fn predict_proba(&self, texts: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        self.inner.predict_proba(&examples(&texts, None)?).map_err(to_py)
    }

    fn predict(&self, texts: Vec<String>) -> PyResult<Vec<usize>> {
        self.inner.predict(&examples(&texts, None)?).map_err(to_py)
    }

    /// Mean cross-entropy.
    fn loss(&self, texts: Vec<String>, labels: Vec<usize>) -> PyResult<f64> {
        self.inner.loss(&examples(&texts, Some(&labels))?).map_err(to_py)
    }

    /// Returns the fine-tuned copy and the per-epoch losses; `self` is unchanged.
    #[pyo3(signature = (texts, labels, lr=2.0, epochs=20, batch_size=32, seed=0))]
    fn fine_tune(
        &self,
        py: Python<'_>,
        texts: Vec<String>,
        labels: Vec<usize>,
        lr: f64,
        epochs: usize,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<(Self, Vec<f64>)> {
        let train = examples(&texts, Some(&labels))?;
        let cfg = TrainConfig {
            lr,
            epochs,
            batch_size,
            seed,
            ..TrainConfig::default()
        };
        let out = py.detach(|| fine_tune(&self.inner, &train, &cfg)).map_err(to_py)?;
        Ok((Self { inner: out.model }, out.epoch_losses))
    }

    #[pyo3(signature = (path, task_id=1, seed=0))]
    fn save(&self, path: PathBuf, task_id: u8, seed: u64) -> PyResult<()> {
        let task = TaskSpec::by_id(task_id).map_err(to_py)?;
        if task.num_classes() != self.inner.arch.num_classes {
            return Err(PyValueError::new_err(format!(
                "task {task_id} has {} classes, model has {}",
                task.num_classes(),
                self.inner.arch.num_classes
            )));
        }
        let meta = ModelMeta {
            task,
            vocab_size: self.inner.arch.vocab_size,
            dim: self.inner.arch.dim,
            seed,
        };
        self.inner.save(&path, &meta).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: TextClassifier::load(&path).map_err(to_py)?.0,
        })
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        let a = self.inner.arch;
        format!("TextClassifier(num_classes={}, vocab_size={}, dim={})", a.num_classes, a.vocab_size, a.dim)
    }
}

#[pymodule]
fn xlmh(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTextClassifier>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(featurize, m)?)?;
    m.add_function(wrap_pyfunction!(fnv1a64, m)?)?;
    m.add_function(wrap_pyfunction!(macro_f1, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(label_names, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_pair, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompts, m)?)?;
    m.add_function(wrap_pyfunction!(overlap_score, m)?)?;
    Ok(())
}
