//! Python bindings. Tensors cross the boundary as flat float lists plus a
//! shape; `Tensor.from_list` / `Tensor.tolist` convert.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ssadv_core::attack::{self, AttackConfig, Norm};
use ssadv_core::data::{self, ImageDataset};
use ssadv_core::eval::{self, EvalOptions};
use ssadv_core::model::{self as core_model, ArchConfig, Head, Network, Preset, TwoHeadModel};
use ssadv_core::sstask;
use ssadv_core::tensor::{read_container, write_container};
use ssadv_core::train::{self, ModeTag, RunOptions, TrainConfig, TrainMode};

fn py_err(e: ssadv_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Tensor", module = "ssadv", skip_from_py_object)]
#[derive(Clone)]
struct PyTensor(ssadv_core::tensor::Tensor);

#[pymethods]
impl PyTensor {
    #[staticmethod]
    fn from_list(data: Vec<f32>, shape: Vec<usize>) -> PyResult<Self> {
        ssadv_core::tensor::Tensor::new(shape, data).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self(ssadv_core::tensor::Tensor::zeros(shape))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn checksum(&self) -> u64 {
        self.0.checksum()
    }

    fn __len__(&self) -> usize {
        self.0.shape().first().copied().unwrap_or(0)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

#[pyclass(name = "Model", module = "ssadv")]
struct PyModel(TwoHeadModel);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (arch, input_shape, classes, ss_classes=4, width=1.0, seed=0))]
    fn new(arch: &str, input_shape: [usize; 3], classes: usize, ss_classes: usize, width: f32, seed: u64) -> PyResult<Self> {
        let cfg = ArchConfig::new(Preset::parse(arch).map_err(py_err)?, input_shape, classes, ss_classes).with_width(width);
        core_model::build_model(&cfg, seed).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let c = read_container(&path).map_err(py_err)?;
        TwoHeadModel::from_container(&c).map(Self).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_container(&path, &self.0.to_container()).map_err(py_err)
    }

    #[getter]
    fn input_shape(&self) -> [usize; 3] {
        self.0.input_shape()
    }

    #[getter]
    fn classes(&self) -> Option<usize> {
        self.0.classes(Head::Sup)
    }

    #[getter]
    fn ss_classes(&self) -> Option<usize> {
        self.0.classes(Head::Ss)
    }

    fn param_count(&self) -> usize {
        self.0.params().numel()
    }

    fn checksum(&self) -> u64 {
        self.0.params().checksum()
    }

    /// Eval-mode logits of the supervised (`head="sup"`) or SS head.
    #[pyo3(signature = (x, head="sup"))]
    fn logits(&self, x: &PyTensor, head: &str) -> PyResult<PyTensor> {
        let head = match head {
            "sup" => Head::Sup,
            "ss" => Head::Ss,
            other => return Err(PyValueError::new_err(format!("unknown head {other:?}"))),
        };
        core_model::predict(&self.0, &x.0, head).map(PyTensor).map_err(py_err)
    }

    fn predict(&self, x: &PyTensor) -> PyResult<Vec<usize>> {
        let logits = core_model::predict_sup(&self.0, &x.0).map_err(py_err)?;
        Ok(core_model::argmax_rows(&logits))
    }
}

#[pyclass(name = "Dataset", module = "ssadv")]
struct PyDataset(ImageDataset);

#[pymethods]
impl PyDataset {
    #[new]
    fn new(images: &PyTensor, labels: Vec<usize>, classes: usize) -> PyResult<Self> {
        ImageDataset::new("python", images.0.clone(), labels, classes).map(Self).map_err(py_err)
    }

    #[staticmethod]
    #[pyo3(signature = (kind, n, input_shape, seed=0))]
    fn synthetic(kind: &str, n: usize, input_shape: [usize; 3], seed: u64) -> PyResult<Self> {
        let kind = data::SyntheticKind::parse(kind).map_err(py_err)?;
        data::synthetic_dataset(kind, n, input_shape, seed).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ImageDataset::load(&path).map(Self).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(py_err)
    }

    #[getter]
    fn images(&self) -> PyTensor {
        PyTensor(self.0.images().clone())
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.0.labels().to_vec()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.0.classes()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "SsTask", module = "ssadv", from_py_object)]
#[derive(Clone)]
struct PySsTask(sstask::SsTask);

#[pymethods]
impl PySsTask {
    #[staticmethod]
    fn rotation() -> Self {
        Self(sstask::SsTask::rotation())
    }

    #[staticmethod]
    #[pyo3(signature = (grid=2, count=24, seed=0))]
    fn jigsaw(grid: usize, count: usize, seed: u64) -> PyResult<Self> {
        sstask::SsTask::jigsaw(grid, count, seed).map(Self).map_err(py_err)
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.0.class_count()
    }

    /// Transform each image by its given label.
    fn apply(&self, x: &PyTensor, labels: Vec<usize>) -> PyResult<PyTensor> {
        self.0.apply_labels(&x.0, &labels).map(PyTensor).map_err(py_err)
    }

    /// Transform by labels drawn uniformly from `seed`.
    fn sample(&self, x: &PyTensor, seed: u64) -> PyResult<(PyTensor, Vec<usize>)> {
        let (t, y) = self.0.apply(&x.0, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(py_err)?;
        Ok((PyTensor(t), y))
    }
}

fn attack_config(norm: &str, epsilon: f64, alpha: Option<f64>, steps: usize) -> PyResult<AttackConfig> {
    let norm = Norm::parse(norm).map_err(py_err)?;
    let alpha = alpha.unwrap_or_else(|| eval::eval_alpha(norm, epsilon, steps));
    let cfg = AttackConfig::new(norm, epsilon, alpha, steps);
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// PGD on the supervised loss; returns the adversarial batch and the
/// per-sample loss at the final iterate.
#[pyfunction]
#[pyo3(signature = (model, x, labels, norm="linf", epsilon=8.0/255.0, alpha=None, steps=10, seed=0))]
#[allow(clippy::too_many_arguments)]
fn pgd_attack(
    model: &PyModel,
    x: &PyTensor,
    labels: Vec<usize>,
    norm: &str,
    epsilon: f64,
    alpha: Option<f64>,
    steps: usize,
    seed: u64,
) -> PyResult<(PyTensor, Vec<f32>)> {
    let cfg = attack_config(norm, epsilon, alpha, steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adv = attack::pgd_attack(&model.0, &x.0, &labels, None, &cfg, &mut rng).map_err(py_err)?;
    attack::verify_containment(&x.0, &adv.x_adv, cfg.norm, cfg.epsilon).map_err(py_err)?;
    Ok((PyTensor(adv.x_adv), adv.losses))
}

#[pyfunction]
#[pyo3(signature = (model, dataset, batch_size=256))]
fn eval_standard(model: &PyModel, dataset: &PyDataset, batch_size: usize) -> PyResult<f64> {
    eval::eval_standard(&model.0, &dataset.0, batch_size).map_err(py_err)
}

/// `[(eps, accuracy %)]`; eps 0 is clean accuracy.
#[pyfunction]
#[pyo3(signature = (model, dataset, eps, norm="linf", steps=20, seed=0, restarts=1))]
fn eval_robust(
    model: &PyModel,
    dataset: &PyDataset,
    eps: Vec<f64>,
    norm: &str,
    steps: usize,
    seed: u64,
    restarts: usize,
) -> PyResult<Vec<(f64, f64)>> {
    let base = AttackConfig::new(Norm::parse(norm).map_err(py_err)?, 0.0, 0.0, steps);
    let opts = EvalOptions { seed, restarts, ..EvalOptions::default() };
    eval::eval_robust(&model.0, &dataset.0, &eps, &base, &opts).map_err(py_err)
}

/// Adversarial training in one of T0, T1, T2, T3, T_rotonly; returns the
/// best model by validation accuracy (the last one without `val`).
#[pyfunction]
#[pyo3(signature = (
    model, train_set, mode="T0", lambda1=0.0, lambda2=1.0, norm="linf", epsilon=8.0/255.0,
    alpha=None, steps=10, epochs=1, batch_size=128, seed=0, task=None, val=None, out_dir=None
))]
#[allow(clippy::too_many_arguments)]
fn adv_train(
    model: &PyModel,
    train_set: &PyDataset,
    mode: &str,
    lambda1: f64,
    lambda2: f64,
    norm: &str,
    epsilon: f64,
    alpha: Option<f64>,
    steps: usize,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    task: Option<PySsTask>,
    val: Option<&PyDataset>,
    out_dir: Option<PathBuf>,
) -> PyResult<PyModel> {
    let tag = ModeTag::parse(mode).map_err(py_err)?;
    let mut attack = attack_config(norm, epsilon, alpha, steps)?;
    attack.lambda2 = lambda2;
    attack.use_ss_loss = tag == ModeTag::T3;
    let cfg = TrainConfig::new(TrainMode { tag, lambda1, attack }, epochs, batch_size, seed);
    let task = task.map(|t| t.0).unwrap_or_else(sstask::SsTask::rotation);
    let opts = RunOptions { out_dir, ..RunOptions::default() };
    let out = train::adv_train(
        &cfg,
        model.0.clone(),
        tag.uses_ss().then_some(&task),
        &train_set.0,
        val.map(|v| &v.0),
        &opts,
    )
    .map_err(py_err)?;
    Ok(PyModel(out.best))
}

#[pyfunction]
fn compose_loss(mode: &str, lambda1: f64, sup: f32, ss: Option<f32>) -> PyResult<f32> {
    train::compose_loss(ModeTag::parse(mode).map_err(py_err)?, lambda1, sup, ss).map_err(py_err)
}

#[pymodule]
fn ssadv(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PySsTask>()?;
    m.add_function(wrap_pyfunction!(pgd_attack, m)?)?;
    m.add_function(wrap_pyfunction!(eval_standard, m)?)?;
    m.add_function(wrap_pyfunction!(eval_robust, m)?)?;
    m.add_function(wrap_pyfunction!(adv_train, m)?)?;
    m.add_function(wrap_pyfunction!(compose_loss, m)?)?;
    Ok(())
}
