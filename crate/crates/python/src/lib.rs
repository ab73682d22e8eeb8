//! Python bindings. Tensors cross the boundary as flat `list[float]` plus a
//! shape tuple.

use std::path::PathBuf;

use milab_core::data::{load_idx, synth_blobs, Dataset};
use milab_core::eval::{knn_dist, topk_hits};
use milab_core::gan::Generator;
use milab_core::invert::{sample_latent, LatentDistribution, PregMode};
use milab_core::nn::Classifier;
use milab_core::pipeline::{ExperimentConfig, Pipeline, Stage, Variant};
use milab_core::{Error, Tensor};
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    let msg = format!("[{}] {e}", e.kind());
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) | Error::Shape { .. } => PyValueError::new_err(msg),
        Error::MissingArtifact { .. } | Error::Io { .. } => PyFileNotFoundError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn tensor(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(to_py)
}

fn unpack(t: Tensor) -> (Vec<f64>, Vec<usize>) {
    let shape = t.shape().to_vec();
    (t.into_data(), shape)
}

/// Resolved experiment configuration.
#[pyclass(name = "ExperimentConfig")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Parses TOML text; `overrides` are `a.b.c=value` strings.
    #[staticmethod]
    #[pyo3(signature = (text, overrides = Vec::new()))]
    fn from_toml(text: &str, overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyConfig {
            inner: ExperimentConfig::from_toml_str(text, &overrides).map_err(to_py)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, overrides = Vec::new()))]
    fn load(path: PathBuf, overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyConfig {
            inner: ExperimentConfig::load(&path, &overrides).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(to_py)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.out_dir.clone()
    }
}

fn parse_stage(name: &str) -> PyResult<Stage> {
    Stage::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown stage `{name}`")))
}

#[pyclass(name = "Pipeline", unsendable)]
struct PyPipeline {
    inner: Pipeline,
}

#[pymethods]
impl PyPipeline {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        Ok(PyPipeline {
            inner: Pipeline::new(config.inner.clone()).map_err(to_py)?,
        })
    }

    /// Runs one stage (`train-target`, ..., `analyze-overfit`).
    #[pyo3(signature = (stage, variant = None))]
    fn run_stage(&mut self, stage: &str, variant: Option<&str>) -> PyResult<()> {
        let v = variant.map(Variant::parse).transpose().map_err(to_py)?;
        self.inner.run_stage(parse_stage(stage)?, v).map_err(to_py)
    }

    /// Runs everything and returns the comparison table as JSON text.
    fn full_experiment(&mut self) -> PyResult<String> {
        let table = self.inner.full_experiment().map_err(to_py)?;
        serde_json::to_string(&table).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// `(unit, cached, seconds)` for every unit run so far.
    fn outcomes(&self) -> Vec<(String, bool, f64)> {
        self.inner
            .outcomes()
            .iter()
            .map(|o| (o.unit.clone(), o.cached, o.seconds))
            .collect()
    }

    fn manifest_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.manifest()).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

#[pyclass(name = "Classifier")]
struct PyClassifier {
    inner: Classifier,
}

#[pymethods]
impl PyClassifier {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyClassifier {
            inner: Classifier::load(&path).map_err(to_py)?,
        })
    }

    #[getter]
    fn arch_tag(&self) -> String {
        self.inner.arch_tag()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn feat_dim(&self) -> usize {
        self.inner.feat_dim()
    }

    /// Logits `[n, K]` for images `[n, C, H, W]`.
    fn logits(&self, images: Vec<f64>, shape: Vec<usize>) -> PyResult<(Vec<f64>, Vec<usize>)> {
        let x = tensor(images, shape)?;
        Ok(unpack(self.inner.predict_logits(&x, 256).map_err(to_py)?))
    }

    /// Penultimate features `[n, d]` (without the appended 1).
    fn features(&self, images: Vec<f64>, shape: Vec<usize>) -> PyResult<(Vec<f64>, Vec<usize>)> {
        let x = tensor(images, shape)?;
        Ok(unpack(self.inner.predict_features(&x, 256).map_err(to_py)?))
    }
}

#[pyclass(name = "Generator")]
struct PyGenerator {
    inner: Generator,
}

#[pymethods]
impl PyGenerator {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyGenerator {
            inner: Generator::load(&path).map_err(to_py)?,
        })
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    /// Images for latents `[n, n_z]`.
    fn generate(&self, z: Vec<f64>, shape: Vec<usize>) -> PyResult<(Vec<f64>, Vec<usize>)> {
        let z = tensor(z, shape)?;
        Ok(unpack(self.inner.generate(&z).map_err(to_py)?))
    }
}

fn dataset_parts(d: Dataset) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
    let labels = d.labels().to_vec();
    let (data, shape) = unpack(d.images().clone());
    (data, shape, labels)
}

/// Seeded blob dataset: `(images, shape, labels)`.
#[pyfunction]
#[pyo3(name = "synth_blobs")]
fn py_synth_blobs(
    n_classes: usize,
    n_per_class: usize,
    image_size: usize,
    seed: u64,
) -> PyResult<(Vec<f64>, Vec<usize>, Vec<usize>)> {
    Ok(dataset_parts(synth_blobs(n_classes, n_per_class, image_size, seed).map_err(to_py)?))
}

/// IDX image/label files (optionally gzip) as `(images, shape, labels)`.
#[pyfunction]
#[pyo3(name = "load_idx")]
fn py_load_idx(images: PathBuf, labels: PathBuf) -> PyResult<(Vec<f64>, Vec<usize>, Vec<usize>)> {
    Ok(dataset_parts(load_idx(&images, &labels).map_err(to_py)?))
}

/// Draws `n` latents per row from a diagonal Gaussian given as `mu` and
/// `log_sigma` of shape `[rows, n_z]`.
#[pyfunction]
#[pyo3(signature = (mu, log_sigma, shape, n, clip = true, seed = 0))]
fn gaussian_latents(
    mu: Vec<f64>,
    log_sigma: Vec<f64>,
    shape: Vec<usize>,
    n: usize,
    clip: bool,
    seed: u64,
) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let dist = LatentDistribution::DiagonalGaussian {
        mu: tensor(mu, shape.clone())?,
        log_sigma: tensor(log_sigma, shape)?,
    };
    Ok(unpack(sample_latent(&dist, n, clip, seed).map_err(to_py)?))
}

/// Top-k hit flags of `logits [n, K]` against `targets`.
#[pyfunction]
fn topk(logits: Vec<f64>, shape: Vec<usize>, targets: Vec<usize>, k: usize) -> PyResult<Vec<bool>> {
    Ok(topk_hits(&tensor(logits, shape)?, &targets, k))
}

/// Mean shortest evaluation-feature distance from `recons` to the samples of
/// `class_id` in a labelled dataset.
#[pyfunction]
fn knn_distance(
    eval_model: &PyClassifier,
    recons: Vec<f64>,
    recons_shape: Vec<usize>,
    private: Vec<f64>,
    private_shape: Vec<usize>,
    labels: Vec<usize>,
    class_id: usize,
) -> PyResult<f64> {
    let d = Dataset::new(tensor(private, private_shape)?, labels).map_err(to_py)?;
    knn_dist(&tensor(recons, recons_shape)?, &d, &eval_model.inner, class_id).map_err(to_py)
}

/// `"fixed"` or `"sampled"`; validates an anchor mode string.
#[pyfunction]
fn preg_mode(name: &str) -> PyResult<String> {
    let m: PregMode = serde_json::from_value(serde_json::Value::String(name.into()))
        .map_err(|_| PyValueError::new_err(format!("unknown p_reg mode `{name}`")))?;
    Ok(format!("{m:?}").to_lowercase())
}

#[pymodule]
fn milab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyPipeline>()?;
    m.add_class::<PyClassifier>()?;
    m.add_class::<PyGenerator>()?;
    m.add_function(wrap_pyfunction!(py_synth_blobs, m)?)?;
    m.add_function(wrap_pyfunction!(py_load_idx, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_latents, m)?)?;
    m.add_function(wrap_pyfunction!(topk, m)?)?;
    m.add_function(wrap_pyfunction!(knn_distance, m)?)?;
    m.add_function(wrap_pyfunction!(preg_mode, m)?)?;
    Ok(())
}
