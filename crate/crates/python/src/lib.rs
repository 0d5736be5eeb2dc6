//! Python bindings: dataset generation, model construction, training,
//! evaluation and attention inspection.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use attnguide::cli::{attention_plot, evaluate_splits, RunConfig};
use attnguide::model::{count_parameters as count, Model};
use attnguide::numerics::{masked_softmax as softmax, seeded_rng};
use attnguide::tasks::{
    build_lookup_splits, build_sr_splits, dataset_stats, generate_grammar, read_tsv, stats_csv, write_tsv,
    DatasetBundle, LookupTaskSpec, SymbolRewritingSpec,
};
use attnguide::training::{fit, MetricsRecord};
use attnguide::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn apply_kwargs(rc: &mut RunConfig, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<()> {
    if let Some(kw) = kwargs {
        for (k, v) in kw.iter() {
            let key: String = k.extract()?;
            let value = v.str()?.to_string();
            rc.set(&key, &value).map_err(py_err)?;
        }
    }
    Ok(())
}

fn record_dict<'py>(py: Python<'py>, r: &MetricsRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("split", &r.split)?;
    d.set_item("epoch", r.epoch)?;
    d.set_item("task_loss", r.task_loss)?;
    d.set_item("ag_loss", r.ag_loss)?;
    d.set_item("seq_acc", r.seq_accuracy)?;
    d.set_item("token_acc", r.token_accuracy)?;
    d.set_item("attn_acc", r.attn_accuracy)?;
    d.set_item("grammar_acc", r.grammar_accuracy)?;
    Ok(d)
}

/// A task dataset: named splits of (source, target, attention targets).
#[pyclass(name = "Dataset", module = "attnguide", skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: DatasetBundle,
}

#[pymethods]
impl PyDataset {
    /// Lookup-table compositions with the default split construction.
    #[staticmethod]
    #[pyo3(signature = (seed=0))]
    fn lookup(seed: u64) -> PyResult<Self> {
        let mut rng = seeded_rng(seed);
        let inner = build_lookup_splits(&LookupTaskSpec::default(), seed, &mut rng).map_err(py_err)?;
        Ok(PyDataset { inner })
    }

    /// Symbol rewriting; sizes default to the desk-scale corpus.
    #[staticmethod]
    #[pyo3(signature = (seed=0, train_size=None, test_size=None, validation_size=None))]
    fn symbol_rewriting(
        seed: u64,
        train_size: Option<usize>,
        test_size: Option<usize>,
        validation_size: Option<usize>,
    ) -> PyResult<Self> {
        let mut spec = SymbolRewritingSpec::default();
        spec.train_size = train_size.unwrap_or(spec.train_size);
        spec.test_size = test_size.unwrap_or(spec.test_size);
        spec.validation_size = validation_size.unwrap_or(spec.validation_size);
        let mut rng = seeded_rng(seed);
        let grammar = generate_grammar(&spec, &mut rng);
        let inner = build_sr_splits(&spec, &grammar, seed, &mut rng).map_err(py_err)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: read_tsv(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_tsv(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn task(&self) -> String {
        self.inner.task.to_string()
    }

    fn split_names(&self) -> Vec<String> {
        self.inner.split_names()
    }

    /// `(source, target, ag_target)` triples of one split.
    fn examples(&self, split: &str) -> PyResult<Vec<(Vec<String>, Vec<String>, Vec<usize>)>> {
        let exs = self.inner.require_split(split).map_err(py_err)?;
        Ok(exs
            .iter()
            .map(|e| (e.source.clone(), e.target.clone(), e.ag_target.clone()))
            .collect())
    }

    /// Composition or length histogram CSV.
    fn stats_csv(&self) -> String {
        stats_csv(&dataset_stats(&self.inner))
    }

    fn __len__(&self) -> usize {
        self.inner.splits.iter().map(|(_, v)| v.len()).sum()
    }

    fn __repr__(&self) -> String {
        let parts: Vec<String> = self
            .inner
            .splits
            .iter()
            .map(|(n, v)| format!("{n}={}", v.len()))
            .collect();
        format!("Dataset({}, {})", self.inner.task, parts.join(", "))
    }
}

/// Encoder-decoder model. Keyword arguments are config keys, e.g.
/// `Model(ds, hidden_size=64, mechanism="pre_rnn")`.
#[pyclass(name = "Model", module = "attnguide", skip_from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (dataset, seed=0, **config))]
    fn new(dataset: &PyDataset, seed: u64, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut rc = RunConfig::default();
        apply_kwargs(&mut rc, config)?;
        let inner = Model::new(
            rc.model,
            dataset.inner.source_vocab.clone(),
            dataset.inner.target_vocab.clone(),
            seed,
        )
        .map_err(py_err)?;
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: Model::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.params.scalar_count()
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for (k, v) in self.inner.config.pairs() {
            d.set_item(k, v)?;
        }
        Ok(d)
    }

    /// Greedy output tokens and the attention matrix (one row per step).
    #[pyo3(signature = (source, oracle=None))]
    fn greedy(&self, source: Vec<String>, oracle: Option<Vec<usize>>) -> PyResult<(Vec<String>, Vec<Vec<f64>>)> {
        let enc = self.inner.encode(&source).map_err(py_err)?;
        let (tokens, steps) = self
            .inner
            .greedy_decode(&enc, self.inner.config.max_decode_length, oracle.as_deref())
            .map_err(py_err)?;
        Ok((tokens, steps.into_iter().map(|s| s.attention.weights).collect()))
    }

    /// Attention matrix and correctness of one dataset example.
    fn attention(&self, dataset: &PyDataset, split: &str, index: usize) -> PyResult<(Vec<Vec<f64>>, bool)> {
        let p = attention_plot(&self.inner, &dataset.inner, split, index).map_err(py_err)?;
        Ok((p.rows, p.correct))
    }

    /// One metrics dict per split (all splits when `splits` is None).
    #[pyo3(signature = (dataset, splits=None, batch_size=64))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        splits: Option<Vec<String>>,
        batch_size: usize,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let recs = evaluate_splits(&self.inner, &dataset.inner, &splits.unwrap_or_default(), batch_size.max(1))
            .map_err(py_err)?;
        recs.iter().map(|r| record_dict(py, r)).collect()
    }

    /// Trains a copy and returns `(best_model, best_epoch, history)`.
    /// Keyword arguments are training keys (`epochs`, `learning_rate`, ...).
    #[pyo3(signature = (dataset, **settings))]
    fn fit<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        settings: Option<&Bound<'py, PyDict>>,
    ) -> PyResult<(PyModel, usize, Vec<Bound<'py, PyDict>>)> {
        let mut rc = RunConfig {
            model: self.inner.config.clone(),
            ..Default::default()
        };
        apply_kwargs(&mut rc, settings)?;
        if rc.model != self.inner.config {
            return Err(PyValueError::new_err("fit takes training settings only"));
        }
        let fr = fit(self.inner.clone(), &dataset.inner, &rc.train, None).map_err(py_err)?;
        let history = fr.history.iter().map(|r| record_dict(py, r)).collect::<PyResult<_>>()?;
        Ok((PyModel { inner: fr.best }, fr.best_epoch, history))
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model({}x{}, {}, {}, {}, {} parameters)",
            c.embedding_size,
            c.hidden_size,
            c.alignment,
            c.mechanism,
            c.guidance,
            self.inner.params.scalar_count()
        )
    }
}

/// Closed-form parameter count; keyword arguments are config keys.
#[pyfunction]
#[pyo3(signature = (**config))]
fn count_parameters(config: Option<&Bound<'_, PyDict>>) -> PyResult<usize> {
    let mut rc = RunConfig::default();
    apply_kwargs(&mut rc, config)?;
    Ok(count(&rc.model))
}

/// Softmax over the positions where `mask` is true; others are 0.
#[pyfunction]
fn masked_softmax(scores: Vec<f64>, mask: Vec<bool>) -> PyResult<Vec<f64>> {
    softmax(&scores, &mask).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "attnguide")]
fn attnguide_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(count_parameters, m)?)?;
    m.add_function(wrap_pyfunction!(masked_softmax, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
