//! Python bindings: configs, corpora, detectors, the autodiff tape, metrics
//! and protocol runs.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use e3lab::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use e3lab::config::{effective_capacity, RunConfig};
use e3lab::detector::{build_detector, predict_scores, CapacityPreset, DetectorModel};
use e3lab::e3::quota;
use e3lab::metrics;
use e3lab::protocol::{train_baseline, EpisodeReport, ProtocolResult};
use e3lab::runner::{execute, Inputs, RunRequest};
use e3lab::synthgen::{build_corpus, Corpus, Label, LabeledImage, Split};
use e3lab::tensor::{Gradients, Tape, Tensor, TensorError, Var};
use e3lab::E3Error;

fn err(e: E3Error) -> PyErr {
    match e {
        E3Error::Io(io) => PyOSError::new_err(io.to_string()),
        e if e.is_config() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn terr(e: TensorError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_split(s: &str) -> PyResult<Split> {
    Split::ALL
        .into_iter()
        .find(|sp| sp.name() == s)
        .ok_or_else(|| PyValueError::new_err(format!("unknown split `{s}`")))
}

fn parse_preset(s: &str) -> PyResult<CapacityPreset> {
    match s {
        "tiny" => Ok(CapacityPreset::Tiny),
        "small" => Ok(CapacityPreset::Small),
        "medium" => Ok(CapacityPreset::Medium),
        _ => Err(PyValueError::new_err(format!("unknown preset `{s}`"))),
    }
}

/// Dense f32 tensor.
#[pyclass(name = "Tensor", module = "e3lab_py", skip_from_py_object)]
#[derive(Clone)]
struct PyTensor(Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (shape, data, requires_grad = false))]
    fn new(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> PyResult<Self> {
        let mut t = Tensor::new(&shape, data).map_err(terr)?;
        t.set_requires_grad(requires_grad);
        Ok(Self(t))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    #[getter]
    fn requires_grad(&self) -> bool {
        self.0.requires_grad()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

/// Handle to a value recorded on a `Tape`.
#[pyclass(name = "Var", module = "e3lab_py", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyVar(Var);

/// Reverse-mode autodiff record.
#[pyclass(name = "Tape", module = "e3lab_py", unsendable)]
struct PyTape(Tape);

#[pymethods]
impl PyTape {
    #[new]
    fn new() -> Self {
        Self(Tape::new())
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn leaf(&self, t: PyRef<'_, PyTensor>) -> PyVar {
        PyVar(self.0.leaf(&t.0))
    }

    fn constant(&self, shape: Vec<usize>, data: Vec<f32>) -> PyResult<PyVar> {
        self.0.constant(&shape, data).map(PyVar).map_err(terr)
    }

    fn value(&self, v: PyVar) -> Vec<f32> {
        self.0.value(v.0)
    }

    fn shape(&self, v: PyVar) -> Vec<usize> {
        self.0.shape(v.0)
    }

    fn matmul(&self, a: PyVar, b: PyVar) -> PyResult<PyVar> {
        self.0.matmul(a.0, b.0).map(PyVar).map_err(terr)
    }

    fn add(&self, a: PyVar, b: PyVar) -> PyResult<PyVar> {
        self.0.add(a.0, b.0).map(PyVar).map_err(terr)
    }

    fn hadamard(&self, a: PyVar, b: PyVar) -> PyResult<PyVar> {
        self.0.hadamard(a.0, b.0).map(PyVar).map_err(terr)
    }

    fn scale(&self, x: PyVar, c: f32) -> PyVar {
        PyVar(self.0.scale(x.0, c))
    }

    fn relu(&self, x: PyVar) -> PyVar {
        PyVar(self.0.relu(x.0))
    }

    fn sigmoid(&self, x: PyVar) -> PyVar {
        PyVar(self.0.sigmoid(x.0))
    }

    fn reshape(&self, x: PyVar, shape: Vec<usize>) -> PyResult<PyVar> {
        self.0.reshape(x.0, &shape).map(PyVar).map_err(terr)
    }

    #[pyo3(signature = (x, gamma, beta, eps = 1e-5))]
    fn layer_norm(&self, x: PyVar, gamma: PyVar, beta: PyVar, eps: f32) -> PyResult<PyVar> {
        self.0.layer_norm(x.0, gamma.0, beta.0, eps).map(PyVar).map_err(terr)
    }

    fn attention(&self, q: PyVar, k: PyVar, v: PyVar, seq_len: usize, heads: usize) -> PyResult<PyVar> {
        self.0.attention(q.0, k.0, v.0, seq_len, heads).map(PyVar).map_err(terr)
    }

    fn sum(&self, x: PyVar) -> PyVar {
        PyVar(self.0.sum(x.0))
    }

    fn mean(&self, x: PyVar) -> PyVar {
        PyVar(self.0.mean(x.0))
    }

    #[pyo3(signature = (logits, targets, weights = None))]
    fn bce_with_logits(&self, logits: PyVar, targets: Vec<f32>, weights: Option<Vec<f32>>) -> PyResult<PyVar> {
        self.0
            .bce_with_logits(logits.0, &targets, weights.as_deref())
            .map(PyVar)
            .map_err(terr)
    }

    fn backward(&self, loss: PyVar) -> PyResult<PyGradients> {
        self.0.backward(loss.0).map(PyGradients).map_err(terr)
    }
}

#[pyclass(name = "Gradients", module = "e3lab_py")]
struct PyGradients(Gradients);

#[pymethods]
impl PyGradients {
    /// Gradient of the loss with respect to `v`, or None if it has none.
    fn get(&self, v: PyVar) -> Option<Vec<f32>> {
        self.0.get(v.0).map(<[f32]>::to_vec)
    }
}

#[pyclass(name = "RunConfig", module = "e3lab_py", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig(RunConfig);

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (master_seed = 0))]
    fn new(master_seed: u64) -> Self {
        Self(RunConfig {
            master_seed,
            ..RunConfig::default()
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        RunConfig::from_toml(text).map(Self).map_err(err)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.0.to_toml().map_err(err)
    }

    fn fingerprint(&self) -> PyResult<String> {
        self.0.fingerprint().map_err(err)
    }

    fn validate(&self) -> PyResult<()> {
        self.0.validate().map_err(err)
    }

    #[getter]
    fn master_seed(&self) -> u64 {
        self.0.master_seed
    }

    #[getter]
    fn budget(&self) -> usize {
        self.0.budget
    }

    #[getter]
    fn buffer_capacity(&self) -> usize {
        self.0.buffer_capacity
    }

    fn generator_sequence(&self) -> Vec<String> {
        self.0.generator_sequence()
    }
}

#[pyclass(name = "Image", module = "e3lab_py", frozen)]
struct PyImage {
    #[pyo3(get)]
    height: usize,
    #[pyo3(get)]
    width: usize,
    #[pyo3(get)]
    pixels: Vec<f32>,
    #[pyo3(get)]
    synthetic: bool,
    #[pyo3(get)]
    source_id: String,
    #[pyo3(get)]
    index: u64,
}

impl From<&LabeledImage> for PyImage {
    fn from(i: &LabeledImage) -> Self {
        Self {
            height: i.height,
            width: i.width,
            pixels: i.pixels.clone(),
            synthetic: i.label.is_synthetic(),
            source_id: i.source_id.clone(),
            index: i.index,
        }
    }
}

impl PyImage {
    fn to_core(&self) -> LabeledImage {
        LabeledImage {
            height: self.height,
            width: self.width,
            pixels: self.pixels.clone(),
            label: if self.synthetic { Label::Synthetic } else { Label::Real },
            source_id: self.source_id.clone(),
            index: self.index,
        }
    }
}

#[pyclass(name = "Corpus", module = "e3lab_py")]
struct PyCorpus(Corpus);

#[pymethods]
impl PyCorpus {
    /// Generates the corpus described by `config`.
    #[staticmethod]
    fn build(config: &PyRunConfig) -> PyResult<Self> {
        build_corpus(&config.0.corpus, config.0.master_seed).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Corpus::import(&dir).map(Self).map_err(err)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.0.export(&dir).map_err(err)
    }

    fn pixel_checksum(&self) -> String {
        self.0.pixel_checksum()
    }

    fn source_ids(&self) -> Vec<String> {
        self.0.source_ids().map(str::to_string).collect()
    }

    #[getter]
    fn emerging_ids(&self) -> Vec<String> {
        self.0.emerging_ids.clone()
    }

    #[pyo3(signature = (source_id, split = "test"))]
    fn images(&self, source_id: &str, split: &str) -> PyResult<Vec<PyImage>> {
        let images = self.0.split(source_id, parse_split(split)?).map_err(err)?;
        Ok(images.iter().map(PyImage::from).collect())
    }
}

#[pyclass(name = "Detector", module = "e3lab_py")]
struct PyDetector(DetectorModel);

#[pymethods]
impl PyDetector {
    /// Untrained detector with a `tiny`, `small` or `medium` backbone.
    #[new]
    #[pyo3(signature = (preset = "small", embed_dim = 32, seed = 0))]
    fn new(preset: &str, embed_dim: usize, seed: u64) -> PyResult<Self> {
        build_detector(parse_preset(preset)?, embed_dim, seed).map(Self).map_err(err)
    }

    /// Trains the baseline detector on the corpus's baseline and real pools.
    #[staticmethod]
    fn train_baseline(config: &PyRunConfig, corpus: &PyCorpus) -> PyResult<Self> {
        train_baseline(&config.0, &corpus.0).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        load_checkpoint(&dir).and_then(Checkpoint::into_detector).map(Self).map_err(err)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        save_checkpoint(&Checkpoint::Detector(self.0.clone()), &dir).map_err(err)
    }

    /// Synthetic-class probabilities on center patches of size `patch`.
    #[pyo3(signature = (images, patch = 32))]
    fn scores(&self, images: Vec<PyRef<'_, PyImage>>, patch: usize) -> PyResult<Vec<f32>> {
        let images: Vec<LabeledImage> = images.iter().map(|i| i.to_core()).collect();
        predict_scores(&self.0, &images, patch).map_err(err)
    }

    fn checksum(&self) -> String {
        self.0.checksum()
    }

    fn param_count(&self) -> usize {
        self.0.param_count()
    }
}

#[pyclass(name = "EpisodeReport", module = "e3lab_py", frozen)]
struct PyEpisode {
    #[pyo3(get)]
    method: String,
    #[pyo3(get)]
    episode: usize,
    #[pyo3(get)]
    generator: Option<String>,
    #[pyo3(get)]
    auc: HashMap<String, f64>,
    #[pyo3(get)]
    accuracy: HashMap<String, f64>,
    #[pyo3(get)]
    average_auc: f64,
    #[pyo3(get)]
    average_accuracy: f64,
    #[pyo3(get)]
    mixed_auc: Option<f64>,
}

impl From<&EpisodeReport> for PyEpisode {
    fn from(e: &EpisodeReport) -> Self {
        Self {
            method: e.method.name().to_string(),
            episode: e.episode,
            generator: e.generator.clone(),
            auc: e.sources.iter().map(|(s, m)| (s.clone(), m.auc)).collect(),
            accuracy: e.sources.iter().map(|(s, m)| (s.clone(), m.accuracy)).collect(),
            average_auc: e.average_auc,
            average_accuracy: e.average_accuracy,
            mixed_auc: e.mixed.map(|m| m.auc),
        }
    }
}

#[pyclass(name = "ProtocolResult", module = "e3lab_py", frozen)]
struct PyProtocolResult {
    #[pyo3(get)]
    label: String,
    #[pyo3(get)]
    protocol: String,
    #[pyo3(get)]
    master_seed: u64,
    #[pyo3(get)]
    budget: usize,
    #[pyo3(get)]
    capacity: usize,
    #[pyo3(get)]
    initial: Vec<Py<PyEpisode>>,
    #[pyo3(get)]
    episodes: Vec<Py<PyEpisode>>,
}

fn convert(py: Python<'_>, r: &ProtocolResult) -> PyResult<PyProtocolResult> {
    let wrap = |es: &[EpisodeReport]| es.iter().map(|e| Py::new(py, PyEpisode::from(e))).collect::<PyResult<Vec<_>>>();
    Ok(PyProtocolResult {
        label: r.label.clone(),
        protocol: r.protocol.name().to_string(),
        master_seed: r.master_seed,
        budget: r.budget,
        capacity: r.capacity,
        initial: wrap(&r.initial)?,
        episodes: wrap(&r.episodes)?,
    })
}

/// Runs the configured protocol for each seed and writes CSVs, manifest and
/// checkpoints under `out_dir`.
#[pyfunction]
#[pyo3(signature = (config, out_dir, seeds = None, checkpoints = true))]
fn run(
    py: Python<'_>,
    config: &PyRunConfig,
    out_dir: PathBuf,
    seeds: Option<Vec<u64>>,
    checkpoints: bool,
) -> PyResult<Vec<PyProtocolResult>> {
    let mut req = RunRequest::new("run", config.0.clone());
    if let Some(s) = seeds {
        req.seeds = s;
    }
    req.checkpoints = checkpoints;
    let results = py.detach(|| execute(&req, Inputs::default(), &out_dir)).map_err(err)?;
    results.iter().map(|r| convert(py, r)).collect()
}

#[pyfunction]
fn roc_auc(pos: Vec<f32>, neg: Vec<f32>) -> PyResult<f64> {
    metrics::roc_auc(&pos, &neg).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (scores, labels, threshold = 0.5))]
fn accuracy(scores: Vec<f32>, labels: Vec<bool>, threshold: f32) -> PyResult<f64> {
    metrics::accuracy(&scores, &labels, threshold).map_err(err)
}

/// Relative error reduction in percent.
#[pyfunction]
fn rer(auc_new: f64, auc_ref: f64) -> PyResult<f64> {
    metrics::rer(auc_new, auc_ref).map_err(err)
}

/// Per-generator buffer slot size after `k` new generators.
#[pyfunction]
#[pyo3(name = "quota")]
fn buffer_quota(capacity: usize, k: usize) -> usize {
    quota(capacity, k)
}

#[pyfunction]
#[pyo3(name = "effective_capacity")]
fn capacity_for(capacity: usize, budget: usize) -> usize {
    effective_capacity(capacity, budget)
}

#[pymodule]
fn e3lab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyVar>()?;
    m.add_class::<PyTape>()?;
    m.add_class::<PyGradients>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyDetector>()?;
    m.add_class::<PyEpisode>()?;
    m.add_class::<PyProtocolResult>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(rer, m)?)?;
    m.add_function(wrap_pyfunction!(buffer_quota, m)?)?;
    m.add_function(wrap_pyfunction!(capacity_for, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
