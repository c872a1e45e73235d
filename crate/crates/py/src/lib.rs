//! Python bindings: text statistics, the classical estimators, the trained
//! classifier and the dataset pipeline.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ::vigkey::analysis::{self, FeatureSchema};
use ::vigkey::cipher;
use ::vigkey::estimators::{DomainSpec, IndexTable, Method};
use ::vigkey::nn::{self as vnn, TrainConfig};
use ::vigkey::pipeline::{self, Dataset, DatasetConfig, FeatureMask};
use ::vigkey::{clean_text as clean, CleanText, Key};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn letters(text: &str) -> CleanText {
    clean(text)
}

/// Uppercase ASCII letters of `text`, everything else dropped.
#[pyfunction]
fn clean_text(text: &str) -> String {
    clean(text).as_str().to_string()
}

#[pyfunction]
fn encrypt(plain: &str, key: &str) -> PyResult<String> {
    let key = Key::new(key).map_err(value_err)?;
    Ok(cipher::encrypt(&letters(plain), &key).as_str().to_string())
}

#[pyfunction]
fn decrypt(ciphertext: &str, key: &str) -> PyResult<String> {
    let key = Key::new(key).map_err(value_err)?;
    Ok(cipher::decrypt(&letters(ciphertext), &key).as_str().to_string())
}

#[pyfunction]
fn index_of_coincidence(text: &str) -> PyResult<f64> {
    analysis::index_of_coincidence(&letters(text)).map_err(value_err)
}

#[pyfunction]
fn ic_key_estimate(text: &str) -> PyResult<f64> {
    analysis::ic_key_estimate(&letters(text)).map_err(value_err)
}

#[pyfunction]
fn twist_index(text: &str, m: usize) -> PyResult<f64> {
    analysis::twist_index(&letters(text), m).map_err(value_err)
}

#[pyfunction]
fn twist_plus_index(text: &str, m: usize) -> PyResult<f64> {
    analysis::twist_plus_index(&letters(text), m).map_err(value_err)
}

#[pyfunction]
fn twist_plus_plus_index(text: &str, m: usize) -> PyResult<f64> {
    analysis::twist_plus_plus_index(&letters(text), m).map_err(value_err)
}

/// `{"top_distances": [...], "top_counts": [...], "has_repeats": bool}`
#[pyfunction]
fn kasiski<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyDict>> {
    let k = analysis::kasiski(&letters(text));
    let d = PyDict::new(py);
    d.set_item("top_distances", k.top_distances.to_vec())?;
    d.set_item("top_counts", k.top_counts.to_vec())?;
    d.set_item("has_repeats", k.has_repeats)?;
    Ok(d)
}

/// Features of a ciphertext under a schema id (`ALL114`, `FINAL77`) or mask name.
#[pyfunction]
#[pyo3(signature = (text, schema = "FINAL77"))]
fn feature_vector(text: &str, schema: &str) -> PyResult<Vec<f64>> {
    let mask = FeatureMask::for_schema_id(schema).map_err(value_err)?;
    Ok(mask.features(&letters(text)).map_err(value_err)?.values)
}

/// Full-vector column indices selected by a mask.
#[pyfunction]
fn mask_indices(name: &str) -> PyResult<Vec<usize>> {
    Ok(FeatureMask::named(name).map_err(value_err)?.indices().to_vec())
}

#[pyfunction]
fn feature_names() -> Vec<String> {
    (0..FeatureSchema::All114.len()).map(analysis::feature_name).collect()
}

/// Classical estimate: `method` is one of ic, twist, tplus, tplusplus. `None` when undefined.
#[pyfunction]
#[pyo3(signature = (text, method, m_min = 3, m_max = 25))]
fn estimate(text: &str, method: &str, m_min: usize, m_max: usize) -> PyResult<Option<usize>> {
    let method: Method = method.parse().map_err(value_err)?;
    if method == Method::Nn {
        return Err(PyValueError::new_err("use Model.predict for the network"));
    }
    let domain = DomainSpec::new(m_min, m_max).map_err(value_err)?;
    let table = IndexTable::from_text(&letters(text), m_max);
    Ok(table.predict(method, &domain).map_err(value_err)?.predicted_k)
}

/// A trained key-length classifier.
#[pyclass(module = "vigkey", frozen)]
struct Model {
    inner: vnn::NetworkModel,
    mask: FeatureMask,
}

impl Model {
    fn wrap(inner: vnn::NetworkModel) -> PyResult<Self> {
        let mask = FeatureMask::for_schema_id(&inner.schema_id).map_err(value_err)?;
        Ok(Model { inner, mask })
    }

    fn features(&self, text: &str) -> PyResult<Vec<f64>> {
        let c = letters(text);
        Ok(self.mask.features(&c).map_err(value_err)?.values)
    }
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Self::wrap(vnn::NetworkModel::load(&path).map_err(runtime_err)?)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(runtime_err)
    }

    #[getter]
    fn schema_id(&self) -> String {
        self.inner.schema_id.clone()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn layer_dims(&self) -> Vec<usize> {
        self.inner.layer_dims()
    }

    /// Most probable key length (3..=25) of a ciphertext.
    fn predict(&self, text: &str) -> PyResult<usize> {
        self.inner.predict_row(&self.features(text)?).map_err(value_err)
    }

    /// Probabilities of key lengths 3..=25, in that order.
    fn predict_proba(&self, text: &str) -> PyResult<Vec<f64>> {
        self.inner.predict_proba_row(&self.features(text)?).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("Model(schema_id={:?}, layer_dims={:?})", self.inner.schema_id, self.inner.layer_dims())
    }
}

/// Generates train/test datasets and returns the manifest as a dict.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (corpus_dir, out_dir, seed, quota = 1300, wordlist = None, key_mode_ratio = 0.5, test_fraction = 0.15))]
fn build_dataset<'py>(
    py: Python<'py>,
    corpus_dir: PathBuf,
    out_dir: PathBuf,
    seed: u64,
    quota: usize,
    wordlist: Option<PathBuf>,
    key_mode_ratio: f64,
    test_fraction: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let config =
        DatasetConfig { quota_per_length: quota, wordlist, key_mode_ratio, test_fraction, seed, ..Default::default() };
    let manifest = py.detach(|| pipeline::build_dataset(&corpus_dir, &out_dir, &config)).map_err(runtime_err)?;
    json_to_py(py, &serde_json::to_string(&manifest).map_err(runtime_err)?)
}

fn json_to_py<'py>(py: Python<'py>, json: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (json,))
}

/// Trains a classifier on a dataset CSV.
#[pyfunction]
#[pyo3(signature = (train_csv, seed, mask = "FINAL", epochs = 10))]
fn train(py: Python<'_>, train_csv: PathBuf, seed: u64, mask: &str, epochs: usize) -> PyResult<Model> {
    let mask = FeatureMask::named(mask).map_err(value_err)?;
    let config = TrainConfig { seed, epochs, ..Default::default() };
    let model = py.detach(|| -> Result<_, pipeline::PipelineError> {
        let data = Dataset::read(&train_csv)?;
        Ok(pipeline::train_model(&data, &mask, &config)?.0)
    });
    Model::wrap(model.map_err(runtime_err)?)
}

/// Evaluates a model and the classical estimators; returns the report as a dict.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, model: &Model, test_csv: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let report = py
        .detach(|| -> Result<_, pipeline::PipelineError> {
            pipeline::evaluate_model(&model.inner, &Dataset::read(&test_csv)?)
        })
        .map_err(runtime_err)?;
    json_to_py(py, &serde_json::to_string(&report).map_err(runtime_err)?)
}

/// The comparison table for a report dict returned by `evaluate`.
#[pyfunction]
fn comparison_table(py: Python<'_>, report: &Bound<'_, PyAny>) -> PyResult<String> {
    let json: String = py.import("json")?.call_method1("dumps", (report,))?.extract()?;
    let report: pipeline::EvaluationReport = serde_json::from_str(&json).map_err(value_err)?;
    Ok(pipeline::compare_methods(&report).render())
}

#[pymodule]
fn vigkey(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(clean_text, m)?)?;
    m.add_function(wrap_pyfunction!(encrypt, m)?)?;
    m.add_function(wrap_pyfunction!(decrypt, m)?)?;
    m.add_function(wrap_pyfunction!(index_of_coincidence, m)?)?;
    m.add_function(wrap_pyfunction!(ic_key_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(twist_index, m)?)?;
    m.add_function(wrap_pyfunction!(twist_plus_index, m)?)?;
    m.add_function(wrap_pyfunction!(twist_plus_plus_index, m)?)?;
    m.add_function(wrap_pyfunction!(kasiski, m)?)?;
    m.add_function(wrap_pyfunction!(feature_vector, m)?)?;
    m.add_function(wrap_pyfunction!(feature_names, m)?)?;
    m.add_function(wrap_pyfunction!(mask_indices, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(build_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(comparison_table, m)?)?;
    m.add_class::<Model>()?;
    m.add("MIN_KEY_LEN", ::vigkey::MIN_KEY_LEN)?;
    m.add("MAX_KEY_LEN", ::vigkey::MAX_KEY_LEN)?;
    Ok(())
}
