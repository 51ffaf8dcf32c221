//! Python bindings: build, train, evaluate and inspect metafuse models.
//!
//! Images cross the boundary as `H × W` nested lists (or anything that
//! iterates like one, such as a 2-D numpy array) with values in `[0, 1]`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use metafuse_core::dataset::{self, DatasetSpec, Split};
use metafuse_core::gradcheck::{self, GradCheckOptions};
use metafuse_core::{checkpoint, metrics, saliency, train as training};
use metafuse_core::{Error, FusionMode, MetaInput, MetaMask, MetaRecord, ModelConfig, Sex, Tensor};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn image_tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("image must be a non-empty rectangular H × W array"));
    }
    Tensor::new(vec![1, h, w], rows.into_iter().flatten().collect()).map_err(to_py)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let w = *t.shape().last().expect("2-D or 3-D");
    t.data().chunks(w).map(<[f64]>::to_vec).collect()
}

fn record(age: Option<f64>, sex: Option<&str>) -> PyResult<Option<MetaRecord>> {
    match (age, sex) {
        (None, None) => Ok(None),
        (Some(age), Some(sex)) => {
            let sex: Sex = sex.parse().map_err(to_py)?;
            Ok(Some(MetaRecord::new(age, sex).map_err(to_py)?))
        }
        _ => Err(PyValueError::new_err("give both age and sex, or neither")),
    }
}

fn meta_input<'a>(model: &metafuse_core::Model, rec: &'a Option<MetaRecord>) -> PyResult<MetaInput<'a>> {
    match (model.config.fusion.uses_meta(), rec) {
        (false, _) => Ok(MetaInput::Absent),
        (true, Some(record)) => Ok(MetaInput::Record { record, mask: MetaMask::NONE }),
        (true, None) => Err(PyValueError::new_err("this fusion model needs age and sex")),
    }
}

/// One labelled image with its subject metadata.
#[pyclass(name = "Sample", frozen, from_py_object)]
#[derive(Clone)]
struct PySample {
    inner: dataset::Sample,
}

#[pymethods]
impl PySample {
    #[new]
    #[pyo3(signature = (id, image, age, sex, label, split=None))]
    fn new(id: String, image: Vec<Vec<f64>>, age: f64, sex: &str, label: usize, split: Option<&str>) -> PyResult<Self> {
        let meta = MetaRecord::new(age, sex.parse().map_err(to_py)?).map_err(to_py)?;
        let split = split.map(str::parse::<Split>).transpose().map_err(to_py)?;
        Ok(PySample { inner: dataset::Sample { id, image: image_tensor(image)?, meta, label, split } })
    }

    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    #[getter]
    fn age(&self) -> f64 {
        self.inner.meta.age
    }

    #[getter]
    fn sex(&self) -> &'static str {
        self.inner.meta.sex.code()
    }

    #[getter]
    fn label(&self) -> usize {
        self.inner.label
    }

    #[getter]
    fn split(&self) -> Option<&'static str> {
        self.inner.split.map(Split::name)
    }

    #[getter]
    fn image(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.image)
    }

    fn __repr__(&self) -> String {
        let split = self.split().map_or("None".to_string(), |s| format!("'{s}'"));
        format!(
            "Sample(id='{}', age={}, sex='{}', label={}, split={split})",
            self.inner.id,
            self.inner.meta.age,
            self.inner.meta.sex.code(),
            self.inner.label,
        )
    }
}

/// A configured network with its parameters.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: metafuse_core::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (variant="FG-Tiny", fusion="vision-only", num_classes=2, image_size=None, seed=0))]
    fn new(variant: &str, fusion: &str, num_classes: usize, image_size: Option<usize>, seed: u64) -> PyResult<Self> {
        let fusion: FusionMode = fusion.parse().map_err(to_py)?;
        let mut cfg = ModelConfig::variant(variant).map_err(to_py)?.with_fusion(fusion).with_classes(num_classes).with_seed(seed);
        if let Some(size) = image_size {
            cfg.image_size = size;
        }
        Ok(PyModel { inner: metafuse_core::build_model(&cfg).map_err(to_py)? })
    }

    /// Builds a model from a run-config JSON string (the `model` section and seed).
    #[staticmethod]
    fn from_config_json(text: &str) -> PyResult<Self> {
        let run = metafuse_core::RunConfig::from_json(text).map_err(to_py)?;
        let cfg = run.model_config().map_err(to_py)?;
        Ok(PyModel { inner: metafuse_core::build_model(&cfg).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel { inner: checkpoint::load(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn fusion(&self) -> String {
        format!("{:?}", self.inner.config.fusion)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.config.num_classes
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.config.image_size
    }

    /// Parameter paths and shapes, in storage order.
    fn parameters(&self) -> Vec<(String, Vec<usize>)> {
        self.inner.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect()
    }

    #[pyo3(signature = (image, age=None, sex=None))]
    fn predict_proba(&self, image: Vec<Vec<f64>>, age: Option<f64>, sex: Option<&str>) -> PyResult<Vec<f64>> {
        let img = image_tensor(image)?;
        let rec = record(age, sex)?;
        let meta = meta_input(&self.inner, &rec)?;
        training::predict_proba(&self.inner, &img, meta).map_err(to_py)
    }

    /// GradCAM heatmap for `target`, at input resolution.
    #[pyo3(signature = (image, target, age=None, sex=None))]
    fn gradcam(&self, image: Vec<Vec<f64>>, target: usize, age: Option<f64>, sex: Option<&str>) -> PyResult<Vec<Vec<f64>>> {
        let img = image_tensor(image)?;
        let rec = record(age, sex)?;
        let meta = meta_input(&self.inner, &rec)?;
        let heat = saliency::gradcam(&self.inner, &img, meta, target).map_err(to_py)?;
        Ok(rows(&heat.full))
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!("Model(variant={:?}, fusion={:?}, num_classes={}, params={})", c.variant, c.fusion, c.num_classes, self.inner.param_count())
    }
}

/// Synthetic dataset with assigned splits.
#[pyfunction]
#[pyo3(signature = (train, val, test, seed=0, beta=1.0, image_size=32, num_classes=2))]
fn generate_synthetic(train: usize, val: usize, test: usize, seed: u64, beta: f64, image_size: usize, num_classes: usize) -> PyResult<Vec<PySample>> {
    let spec = DatasetSpec { num_classes, image_size, beta, seed, ..DatasetSpec::new(train, val, test) };
    let samples = dataset::generate_synthetic(&spec).map_err(to_py)?;
    Ok(samples.into_iter().map(|inner| PySample { inner }).collect())
}

#[pyfunction]
fn load_dataset(dir: PathBuf, num_classes: usize) -> PyResult<Vec<PySample>> {
    let samples = dataset::load_dataset(&dir, num_classes).map_err(to_py)?;
    Ok(samples.into_iter().map(|inner| PySample { inner }).collect())
}

#[pyfunction]
fn save_dataset(dir: PathBuf, samples: Vec<PySample>) -> PyResult<()> {
    let samples: Vec<dataset::Sample> = samples.into_iter().map(|s| s.inner).collect();
    std::fs::create_dir_all(&dir).map_err(|e| PyValueError::new_err(format!("{}: {e}", dir.display())))?;
    dataset::save_dataset(&dir, &samples).map_err(to_py)
}

/// Trains on the train split, validating on the val split. Returns the
/// best-validation model and the per-epoch history.
#[pyfunction]
#[pyo3(signature = (model, samples, epochs=10, learning_rate=3e-4, batch_size=8, seed=0))]
fn train<'py>(
    py: Python<'py>,
    model: &PyModel,
    samples: Vec<PySample>,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> PyResult<(PyModel, Vec<Bound<'py, PyDict>>)> {
    let samples: Vec<dataset::Sample> = samples.into_iter().map(|s| s.inner).collect();
    let cfg = training::TrainConfig { epochs, learning_rate, batch_size, seed, ..Default::default() };
    let outcome = py
        .detach(|| training::train(&model.inner, &samples, &cfg, |_, _| Ok(())))
        .map_err(to_py)?;
    let mut history = Vec::new();
    for r in &outcome.history {
        let d = PyDict::new(py);
        d.set_item("epoch", r.epoch)?;
        d.set_item("train_loss", r.train_loss)?;
        d.set_item("train_acc", r.train_acc)?;
        d.set_item("val_loss", r.val_loss)?;
        d.set_item("val_acc", r.val_acc)?;
        d.set_item("mask_p", r.mask_p)?;
        history.push(d);
    }
    Ok((PyModel { inner: outcome.best }, history))
}

/// Accuracy, loss, confusion matrix and per-class AUC (None when undefined).
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, model: &PyModel, samples: Vec<PySample>) -> PyResult<Bound<'py, PyDict>> {
    let samples: Vec<dataset::Sample> = samples.into_iter().map(|s| s.inner).collect();
    let refs: Vec<&dataset::Sample> = samples.iter().collect();
    let report = py.detach(|| training::evaluate(&model.inner, &refs)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("num_samples", report.num_samples)?;
    d.set_item("accuracy", report.accuracy)?;
    d.set_item("loss", report.loss)?;
    d.set_item("confusion", report.confusion.counts.clone())?;
    let aucs: Vec<Option<f64>> = report.per_class.iter().map(|c| c.auc.value()).collect();
    d.set_item("auc", aucs)?;
    Ok(d)
}

/// Worst relative gradient error per architectural component for one
/// synthetic sample through the whole model.
#[pyfunction]
#[pyo3(signature = (model, max_coords=gradcheck::DEFAULT_MAX_COORDS, seed=0))]
fn gradient_check(py: Python<'_>, model: &PyModel, max_coords: usize, seed: u64) -> PyResult<BTreeMap<String, f64>> {
    let cfg = &model.inner.config;
    let spec = DatasetSpec { num_classes: cfg.num_classes, image_size: cfg.image_size, seed, ..DatasetSpec::new(1, 1, 1) };
    let sample = dataset::generate_synthetic(&spec).map_err(to_py)?.swap_remove(0);
    let opts = GradCheckOptions { max_coords, seed, ..Default::default() };
    let report = py
        .detach(|| gradcheck::check_model(&model.inner, &sample.image, Some(&sample.meta), sample.label, &opts))
        .map_err(to_py)?;
    Ok(report.grouped(|p| gradcheck::component_of(p).to_string()))
}

/// Area under the ROC curve for binary labels, ties counted as half.
#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    Ok(metrics::roc_auc(&scores, &labels).map_err(to_py)?.auc)
}

/// Parameter count of a registry variant.
#[pyfunction]
#[pyo3(signature = (variant, fusion="vision-only", num_classes=3))]
fn param_count(variant: &str, fusion: &str, num_classes: usize) -> PyResult<usize> {
    let fusion: FusionMode = fusion.parse().map_err(to_py)?;
    let cfg = ModelConfig::variant(variant).map_err(to_py)?.with_fusion(fusion).with_classes(num_classes);
    metafuse_core::param_count(&cfg).map_err(to_py)
}

#[pymodule]
fn metafuse(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(save_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add("VARIANTS", metafuse_core::config::VARIANTS.to_vec())?;
    Ok(())
}
