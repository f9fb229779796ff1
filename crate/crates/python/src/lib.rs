//! Python bindings: tensors with gradients, the distillation losses, ROC-AUC,
//! configs and the experiment runner.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use srd_core::config::ExperimentConfig;
use srd_core::distill::{self, Variant};
use srd_core::harness::{self, Summary};
use srd_core::{baselines, metrics, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) | Error::Shape { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

#[pyclass(name = "Tensor", module = "srd_py", from_py_object)]
#[derive(Clone)]
struct PyTensor(srd_core::Tensor);

#[pymethods]
impl PyTensor {
    /// Row-major values with the given shape; `requires_grad` makes a leaf
    /// that accumulates gradients.
    #[new]
    #[pyo3(signature = (values, shape, requires_grad = false))]
    fn new(values: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> PyResult<Self> {
        let t = if requires_grad {
            srd_core::Tensor::parameter(values, &shape)
        } else {
            srd_core::Tensor::new(values, &shape)
        };
        t.map(Self).map_err(to_py)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.0.to_vec()
    }

    fn item(&self) -> PyResult<f64> {
        self.0.item().map_err(to_py)
    }

    #[getter]
    fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad()
    }

    fn zero_grad(&self) {
        self.0.zero_grad()
    }

    fn backward(&self) -> PyResult<()> {
        self.0.backward().map_err(to_py)
    }

    fn matmul(&self, other: &PyTensor) -> PyResult<Self> {
        self.0.matmul(&other.0).map(Self).map_err(to_py)
    }

    fn softmax(&self) -> PyResult<Self> {
        self.0.softmax().map(Self).map_err(to_py)
    }

    fn relu(&self) -> Self {
        Self(self.0.relu())
    }

    fn sum(&self) -> Self {
        Self(self.0.sum())
    }

    fn __add__(&self, other: &PyTensor) -> PyResult<Self> {
        self.0.add(&other.0).map(Self).map_err(to_py)
    }

    fn __mul__(&self, other: &PyTensor) -> PyResult<Self> {
        self.0.mul(&other.0).map(Self).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?}, values={:?})", self.0.shape(), self.0.to_vec())
    }
}

/// Distillation loss between teacher logits and cross-network logits;
/// `variant` is one of kl, mse, pmse.
#[pyfunction]
#[pyo3(signature = (z_t, z_hat, variant = "mse"))]
fn srd_loss(z_t: &PyTensor, z_hat: &PyTensor, variant: &str) -> PyResult<PyTensor> {
    let v: Variant = variant.parse().map_err(PyValueError::new_err)?;
    distill::srd_loss(v, &z_t.0, &z_hat.0).map(PyTensor).map_err(to_py)
}

/// Temperature-scaled distillation loss on logits.
#[pyfunction]
#[pyo3(signature = (z_t, z_s, temperature = 4.0))]
fn kd_loss(z_t: &PyTensor, z_s: &PyTensor, temperature: f64) -> PyResult<PyTensor> {
    baselines::kd_loss(&z_t.0, &z_s.0, temperature).map(PyTensor).map_err(to_py)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, positive: Vec<bool>) -> PyResult<f64> {
    metrics::roc_auc(&scores, &positive).map_err(to_py)
}

#[pyclass(name = "Config", module = "srd_py", from_py_object)]
#[derive(Clone)]
struct PyConfig(ExperimentConfig);

#[pymethods]
impl PyConfig {
    /// Parses config text; an empty string gives the defaults.
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        ExperimentConfig::parse(text).map(Self).map_err(to_py)
    }

    /// The resolved config as text that parses back to the same value.
    fn emit(&self) -> String {
        self.0.emit()
    }

    fn with_dirs(&self, out_dir: PathBuf, teacher_cache: PathBuf) -> Self {
        let mut c = self.0.clone();
        c.run.out_dir = out_dir;
        c.run.teacher_cache = teacher_cache;
        Self(c)
    }
}

#[pyclass(name = "Summary", module = "srd_py", get_all)]
struct PySummary {
    mode: String,
    seeds: usize,
    test_acc_mean: f64,
    test_acc_std: f64,
    test_topk_mean: f64,
    mimicry_kl_mean: f64,
    teacher_accuracy: Vec<f64>,
    per_seed_test_acc: Vec<f64>,
}

fn summary(s: &Summary, teacher_accuracy: Vec<f64>, per_seed: Vec<f64>) -> PySummary {
    PySummary {
        mode: s.mode.to_string(),
        seeds: s.seeds,
        test_acc_mean: s.test_acc.0,
        test_acc_std: s.test_acc.1,
        test_topk_mean: s.test_topk.0,
        mimicry_kl_mean: s.mimicry_kl.0,
        teacher_accuracy,
        per_seed_test_acc: per_seed,
    }
}

/// Pretrains (or loads) the teacher and trains one student per seed.
#[pyfunction]
fn run(py: Python<'_>, config: &PyConfig) -> PyResult<PySummary> {
    let cfg = config.0.clone();
    let out = py.detach(move || harness::run(&cfg)).map_err(to_py)?;
    let per_seed = out.seeds.iter().map(|s| s.last().test_acc).collect();
    Ok(summary(&out.summary, out.teacher_accuracy, per_seed))
}

#[pymodule]
fn srd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PySummary>()?;
    m.add_function(wrap_pyfunction!(srd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(kd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
