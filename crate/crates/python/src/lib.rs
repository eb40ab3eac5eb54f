//! Python bindings: configs, training, checkpoint loading, extraction and metrics.

use std::path::PathBuf;

use candle_core::{Device, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;

use seqmasks::dataset::Split;
use seqmasks::evaluator::{cmc_map as cmc_map_impl, ItemMeta, RetrievalProblem};
use seqmasks::losses;
use seqmasks::trainer::{self, CheckpointManifest, DataConfig, DataFormat};
use seqmasks::Error;

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        2 | 4 => PyValueError::new_err(e.to_string()),
        3 => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_obj<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_word<T: DeserializeOwned>(what: &str, s: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase()))
        .map_err(|_| PyValueError::new_err(format!("unknown {what} `{s}`")))
}

fn to_tensor(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must share one length"));
    }
    Tensor::from_vec(rows.concat(), (n, d), &Device::Cpu).map_err(|e| to_py(e.into()))
}

fn scalar(t: PyResult<Tensor>) -> PyResult<f64> {
    t?.to_scalar::<f64>().map_err(|e| to_py(e.into()))
}

/// Training configuration (TOML).
#[pyclass(name = "TrainConfig", skip_from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: trainer::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => trainer::TrainConfig::from_toml(t).map_err(to_py)?,
            None => trainer::TrainConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: trainer::TrainConfig::load(&path).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(to_py)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    #[setter]
    fn set_epochs(&mut self, epochs: usize) {
        self.inner.epochs = epochs;
    }

    #[getter]
    fn output(&self) -> PathBuf {
        self.inner.output.clone()
    }

    #[setter]
    fn set_output(&mut self, output: PathBuf) {
        self.inner.output = output;
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig(seed={}, epochs={}, output={:?})", self.inner.seed, self.inner.epochs, self.inner.output)
    }
}

/// A trained model loaded from a checkpoint.
#[pyclass(name = "Model", unsendable)]
struct PyModel {
    model: seqmasks::model::SeqMasksModel,
    manifest: CheckpointManifest,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, manifest) = trainer::load_model(&path).map_err(to_py)?;
        Ok(Self { model, manifest })
    }

    #[getter]
    fn descriptor_dim(&self) -> usize {
        self.model.descriptor_dim()
    }

    /// Checkpoint manifest as a dict.
    fn manifest<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_obj(py, &self.manifest)
    }

    /// Embeds every sequence of a corpus; returns (records, skipped) as lists of dicts.
    #[pyo3(signature = (data, format = "mars", split = None, frames_root = None))]
    fn extract<'py>(
        &self,
        py: Python<'py>,
        data: PathBuf,
        format: &str,
        split: Option<&str>,
        frames_root: Option<PathBuf>,
    ) -> PyResult<(Bound<'py, PyAny>, Bound<'py, PyAny>)> {
        let cfg = DataConfig {
            root: data,
            format: parse_word::<DataFormat>("format", format)?,
            frames_root,
            ..DataConfig::default()
        };
        let split = split.map(|s| parse_word::<Split>("split", s)).transpose()?;
        let (index, mut skipped) = trainer::load_index(&cfg).map_err(to_py)?;
        let (records, more) =
            trainer::extract_features(&self.model, &index, split, &self.manifest.input, &self.manifest.extract)
                .map_err(to_py)?;
        skipped.extend(more);
        Ok((json_obj(py, &records)?, json_obj(py, &skipped)?))
    }
}

/// Trains from a config; returns a dict with steps, log path, checkpoints and per-step losses.
#[pyfunction]
#[pyo3(signature = (config, resume = None))]
fn train<'py>(py: Python<'py>, config: &PyTrainConfig, resume: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = &config.inner;
    cfg.validate().map_err(to_py)?;
    let (index, _) = trainer::load_index(&cfg.data).map_err(to_py)?;
    let out = trainer::run(cfg, &index, resume.as_deref()).map_err(to_py)?;
    let value = serde_json::json!({
        "steps": out.steps,
        "log": out.log,
        "checkpoints": out.checkpoints,
        "losses": out.losses,
    });
    json_obj(py, &value)
}

/// CMC at ranks 1/5/10/20 and mAP with same-identity same-camera gallery entries removed.
#[pyfunction]
fn cmc_map<'py>(
    py: Python<'py>,
    query: Vec<Vec<f32>>,
    query_ids: Vec<u32>,
    query_cams: Vec<u32>,
    gallery: Vec<Vec<f32>>,
    gallery_ids: Vec<u32>,
    gallery_cams: Vec<u32>,
) -> PyResult<Bound<'py, PyAny>> {
    let meta = |ids: Vec<u32>, cams: Vec<u32>| -> PyResult<Vec<ItemMeta>> {
        if ids.len() != cams.len() {
            return Err(PyValueError::new_err("ids and cameras differ in length"));
        }
        Ok(ids
            .into_iter()
            .zip(cams)
            .map(|(identity, camera)| ItemMeta { identity, camera, gait: None })
            .collect())
    };
    let problem = RetrievalProblem {
        query_meta: meta(query_ids, query_cams)?,
        gallery_meta: meta(gallery_ids, gallery_cams)?,
        query_emb: query,
        gallery_emb: gallery,
    };
    json_obj(py, &cmc_map_impl(&problem).map_err(to_py)?)
}

#[pyfunction]
fn batch_hard_triplet(embeddings: Vec<Vec<f64>>, labels: Vec<u32>, margin: f64) -> PyResult<f64> {
    scalar(losses::batch_hard_triplet(&to_tensor(&embeddings)?, &labels, margin).map_err(to_py))
}

#[pyfunction]
fn batch_all_triplet(embeddings: Vec<Vec<f64>>, labels: Vec<u32>, margin: f64) -> PyResult<f64> {
    scalar(losses::batch_all_triplet(&to_tensor(&embeddings)?, &labels, margin).map_err(to_py))
}

#[pyfunction]
fn lsr_softmax(logits: Vec<Vec<f64>>, targets: Vec<usize>, eps: f64) -> PyResult<f64> {
    scalar(losses::lsr_softmax(&to_tensor(&logits)?, &targets, eps).map_err(to_py))
}

#[pymodule]
fn seqmasks_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(cmc_map, m)?)?;
    m.add_function(wrap_pyfunction!(batch_hard_triplet, m)?)?;
    m.add_function(wrap_pyfunction!(batch_all_triplet, m)?)?;
    m.add_function(wrap_pyfunction!(lsr_softmax, m)?)?;
    Ok(())
}
