//! Python bindings.
//!
//! Configuration structs cross the boundary as plain dicts: keyword
//! arguments are merged over the Rust defaults, so `pretrain(g, steps=50)`
//! or `infer(m, g, spec={"ways": 3})` only name what they change. Records,
//! metrics and cache entries come back as dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use graphprompter::augmenter::{CacheConfig, PromptCache as CoreCache};
use graphprompter::graph::{
    generate_sbm as core_sbm, generate_synthetic_kg, load_graph, save_graph, Graph as CoreGraph,
    KgParams, SbmParams,
};
use graphprompter::inference::{
    evaluate as core_evaluate, run_inference, InferenceConfig, QueryRecord,
};
use graphprompter::model::ModelConfig;
use graphprompter::selector::{
    knn_similarity as core_knn, score as core_score, vote_select as core_vote, Metric,
};
use graphprompter::tensor::Checkpoint;
use graphprompter::trainer::{
    checkpoint_model, pretrain as core_pretrain, TrainConfig, TrainState,
};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj
        .py()
        .import("json")?
        .call_method1("dumps", (obj,))?
        .extract()?;
    serde_json::from_str(&text).map_err(err)
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// `T::default()` with `overrides` merged in.
fn config_with<T: Serialize + DeserializeOwned + Default>(
    overrides: Option<&Bound<'_, PyDict>>,
) -> PyResult<T> {
    config_from(T::default(), overrides)
}

/// `base` with `overrides` merged in; unknown top-level keys are rejected.
fn config_from<T: Serialize + DeserializeOwned>(
    base: T,
    overrides: Option<&Bound<'_, PyDict>>,
) -> PyResult<T> {
    let mut value = serde_json::to_value(base).map_err(err)?;
    if let Some(d) = overrides {
        let over: Value = from_py(d.as_any())?;
        if let (Value::Object(b), Value::Object(o)) = (&value, &over) {
            if let Some(k) = o.keys().find(|k| !b.contains_key(*k)) {
                return Err(err(format!("unknown option `{k}`")));
            }
        }
        merge(&mut value, over);
    }
    serde_json::from_value(value).map_err(err)
}

/// A multi-relational graph with node features and labels.
#[pyclass(module = "graphprompter", frozen)]
struct Graph {
    inner: CoreGraph,
}

#[pymethods]
impl Graph {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_graph(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_graph(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.inner.num_edges()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    fn check_node(&self, v: usize) -> PyResult<()> {
        if v >= self.inner.num_nodes() {
            return Err(PyIndexError::new_err(format!("node {v} out of range")));
        }
        Ok(())
    }

    fn features(&self, v: usize) -> PyResult<Vec<f64>> {
        self.check_node(v)?;
        Ok(self.inner.features(v).to_vec())
    }

    fn node_label(&self, v: usize) -> PyResult<Option<usize>> {
        self.check_node(v)?;
        Ok(self.inner.node_label(v))
    }

    fn neighbors(&self, v: usize) -> PyResult<Vec<usize>> {
        self.inner.neighbor_ids(v).map_err(err)
    }

    /// `(src, relation, dst)` triples.
    fn edges(&self) -> Vec<(usize, usize, usize)> {
        self.inner
            .edges()
            .iter()
            .map(|e| (e.src, e.rel, e.dst))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Graph(nodes={}, edges={}, feature_dim={})",
            self.inner.num_nodes(),
            self.inner.num_edges(),
            self.inner.feature_dim()
        )
    }
}

/// Stochastic block model graph; keyword arguments override `SbmParams`.
#[pyfunction]
#[pyo3(signature = (**kwargs))]
fn generate_sbm(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Graph> {
    let p: SbmParams = config_with(kwargs)?;
    let inner = py.detach(|| core_sbm(&p)).map_err(err)?;
    Ok(Graph { inner })
}

/// Synthetic knowledge graph; keyword arguments override `KgParams`.
#[pyfunction]
#[pyo3(signature = (**kwargs))]
fn generate_kg(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Graph> {
    let p: KgParams = config_with(kwargs)?;
    let inner = py.detach(|| generate_synthetic_kg(&p)).map_err(err)?;
    Ok(Graph { inner })
}

/// Model parameters with their architecture, as stored in a checkpoint.
#[pyclass(module = "graphprompter", frozen)]
struct Model {
    checkpoint: Checkpoint,
    config: ModelConfig,
}

impl Model {
    fn from_checkpoint(checkpoint: Checkpoint) -> PyResult<Self> {
        let config = checkpoint_model(&checkpoint).map_err(err)?;
        Ok(Self { checkpoint, config })
    }
}

#[pymethods]
impl Model {
    /// Freshly initialized parameters sized for `graph`; keyword arguments
    /// override `ModelConfig` fields.
    #[staticmethod]
    #[pyo3(signature = (graph, seed = 0, **kwargs))]
    fn init(graph: &Graph, seed: u64, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let base = ModelConfig::new(graph.inner.feature_dim(), graph.inner.relation_table_size());
        let config = config_from(base, kwargs)?;
        config.validate().map_err(err)?;
        let train = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let state = TrainState::new(&config, &train).map_err(err)?;
        Self::from_checkpoint(state.to_checkpoint(&config, &train).map_err(err)?)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Self::from_checkpoint(Checkpoint::load(&path).map_err(err)?)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.checkpoint.save(&path).map_err(err)
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.config)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.checkpoint.header.step
    }

    /// SHA-256 over parameter names, shapes and values.
    fn fingerprint(&self) -> String {
        self.checkpoint.params.fingerprint()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.checkpoint.params.names().map(str::to_string).collect()
    }

    fn parameter(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let t = self
            .checkpoint
            .params
            .get(name)
            .ok_or_else(|| err(format!("unknown parameter `{name}`")))?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(step={}, embedding_dim={}, parameters={})",
            self.checkpoint.header.step,
            self.config.embedding_dim,
            self.checkpoint.params.num_values()
        )
    }
}

/// Pretrains a fresh model, or continues `resume`, on `graph`. Keyword
/// arguments override `TrainConfig`. Returns the model and per-step
/// metrics.
#[pyfunction]
#[pyo3(signature = (graph, resume = None, **kwargs))]
fn pretrain(
    py: Python<'_>,
    graph: &Graph,
    resume: Option<&Model>,
    kwargs: Option<&Bound<'_, PyDict>>,
) -> PyResult<(Model, Py<PyAny>)> {
    let train: TrainConfig = config_with(kwargs)?;
    let model = match resume {
        Some(m) => m.config.clone(),
        None => ModelConfig::new(graph.inner.feature_dim(), graph.inner.relation_table_size()),
    };
    let ck = resume.map(|m| &m.checkpoint);
    let outcome = py
        .detach(|| core_pretrain(&graph.inner, &model, &train, None, ck))
        .map_err(err)?;
    let checkpoint = outcome.state.to_checkpoint(&model, &train).map_err(err)?;
    Ok((
        Model {
            checkpoint,
            config: model,
        },
        to_py(py, &outcome.metrics)?,
    ))
}

/// Runs downstream episodes with frozen parameters. Keyword arguments
/// override `InferenceConfig`. Returns one record dict per query.
#[pyfunction]
#[pyo3(signature = (model, graph, **kwargs))]
fn infer(
    py: Python<'_>,
    model: &Model,
    graph: &Graph,
    kwargs: Option<&Bound<'_, PyDict>>,
) -> PyResult<Py<PyAny>> {
    let cfg: InferenceConfig = config_with(kwargs)?;
    let records = py
        .detach(|| run_inference(&model.checkpoint.params, &model.config, &graph.inner, &cfg))
        .map_err(err)?;
    to_py(py, &records)
}

/// Accuracy, per-class accuracy and mean confidence of `infer` records.
#[pyfunction]
fn evaluate(py: Python<'_>, records: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
    let records: Vec<QueryRecord> = from_py(records)?;
    to_py(py, &core_evaluate(&records).map_err(err)?)
}

/// Fixed-capacity LFU store of pseudo-labeled embeddings.
#[pyclass(module = "graphprompter")]
struct PromptCache {
    inner: CoreCache,
}

#[pymethods]
impl PromptCache {
    #[new]
    #[pyo3(signature = (capacity = 3, admit_confidence_floor = 0.5, touch_k = 1))]
    fn new(capacity: usize, admit_confidence_floor: f64, touch_k: usize) -> Self {
        Self {
            inner: CoreCache::new(CacheConfig {
                capacity,
                admit_confidence_floor,
                touch_k,
            }),
        }
    }

    /// Inserts an entry, returning the evicted one if the cache was full.
    fn admit(
        &mut self,
        py: Python<'_>,
        embedding: Vec<f64>,
        label: usize,
        confidence: f64,
    ) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.admit(embedding, label, confidence))
    }

    /// Counts a hit on the most similar entries of every query.
    fn touch(&mut self, queries: Vec<Vec<f64>>) {
        self.inner.touch(&queries);
    }

    fn entries(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.entries())
    }

    fn clear(&mut self) {
        self.inner.clear();
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

fn parse_metric(name: &str) -> PyResult<Metric> {
    serde_json::from_value(Value::String(name.to_string())).map_err(err)
}

/// Pairwise similarity `[candidate][query]`.
#[pyfunction]
#[pyo3(signature = (candidates, queries, metric = "cosine"))]
fn knn_similarity(
    candidates: Vec<Vec<f64>>,
    queries: Vec<Vec<f64>>,
    metric: &str,
) -> PyResult<Vec<Vec<f64>>> {
    Ok(core_knn(&candidates, &queries, parse_metric(metric)?))
}

/// Selection score of one candidate for one query.
#[pyfunction]
fn score(sim: f64, importance_prompt: f64, importance_query: f64) -> f64 {
    core_score(sim, importance_prompt, importance_query)
}

/// Per-class voting over `scores[candidate][query]`; `classes` groups
/// candidate indices. Returns `(chosen per class, votes per candidate)`.
#[pyfunction]
fn vote_select(
    scores: Vec<Vec<f64>>,
    classes: Vec<Vec<usize>>,
    k: usize,
) -> PyResult<(Vec<Vec<usize>>, Vec<f64>)> {
    let r = core_vote(&scores, &classes, k).map_err(err)?;
    Ok((r.chosen, r.votes))
}

#[pymodule]
fn _graphprompter(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Graph>()?;
    m.add_class::<Model>()?;
    m.add_class::<PromptCache>()?;
    m.add_function(wrap_pyfunction!(generate_sbm, m)?)?;
    m.add_function(wrap_pyfunction!(generate_kg, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(knn_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(vote_select, m)?)?;
    Ok(())
}
