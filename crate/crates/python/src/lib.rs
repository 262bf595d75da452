//! Python bindings for `sfda-core`.
//!
//! Matrices cross the boundary as lists of row lists.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use sfda_core::data::{self, Dataset as CoreDataset};
use sfda_core::diagnostics::{self, BoundParameters, DiscreteDistribution};
use sfda_core::engine::{self, AdaptationConfig as CoreConfig, RunMetrics as CoreMetrics};
use sfda_core::losses::{self, JnTarget, ModelOutput};
use sfda_core::{pseudolabel, EncoderClassifier, Tensor};

create_exception!(sfda, SfdaError, PyValueError);

fn err(e: sfda_core::Error) -> PyErr {
    SfdaError::new_err(e.to_string())
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.iter_rows().map(<[f64]>::to_vec).collect()
}

fn distribution(masses: Vec<f64>) -> PyResult<DiscreteDistribution> {
    DiscreteDistribution::new(masses).map_err(err)
}

#[pyclass(module = "sfda", skip_from_py_object, frozen)]
#[derive(Clone)]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    #[new]
    #[pyo3(signature = (features, labels=None, num_classes=2, domain_tag="custom"))]
    fn new(features: Vec<Vec<f64>>, labels: Option<Vec<usize>>, num_classes: usize, domain_tag: &str) -> PyResult<Self> {
        let inner = CoreDataset::new(tensor(features)?, labels, num_classes, domain_tag).map_err(err)?;
        Ok(Self { inner })
    }

    /// Source and rotated target two-moons domains.
    #[staticmethod]
    #[pyo3(signature = (n=600, noise=0.1, rotate=30.0, seed=0))]
    fn two_moons_shift(n: usize, noise: f64, rotate: f64, seed: u64) -> PyResult<(Self, Self)> {
        let (s, t) = data::two_moons_shift(n, noise, rotate, seed).map_err(err)?;
        Ok((Self { inner: s }, Self { inner: t }))
    }

    #[staticmethod]
    #[pyo3(signature = (path, num_classes=None))]
    fn load_csv(path: PathBuf, num_classes: Option<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: data::load_csv(&path, num_classes).map_err(err)?,
        })
    }

    fn save_csv(&self, path: PathBuf) -> PyResult<()> {
        data::save_csv(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.features)
    }

    #[getter]
    fn labels(&self) -> Option<Vec<usize>> {
        self.inner.labels.clone()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    fn unlabeled(&self) -> Self {
        Self {
            inner: self.inner.unlabeled(),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, dim={}, num_classes={}, labeled={})",
            self.inner.len(),
            self.inner.dim(),
            self.inner.num_classes,
            self.inner.labels.is_some()
        )
    }
}

#[pyclass(module = "sfda", skip_from_py_object, get_all, set_all)]
#[derive(Clone)]
struct AdaptationConfig {
    lambda_: f64,
    beta: f64,
    gamma: f64,
    alpha: f64,
    lr: f64,
    lr_new_layer_mult: f64,
    momentum: f64,
    batch_size: usize,
    source_epochs: usize,
    adapt_epochs: usize,
    jn_samples: usize,
    sigma: Option<f64>,
    jn_target: String,
    pseudo_passes: usize,
    hidden_dims: Vec<usize>,
    bottleneck_dim: usize,
    probe_points: usize,
    seed: u64,
}

impl From<CoreConfig> for AdaptationConfig {
    fn from(c: CoreConfig) -> Self {
        Self {
            lambda_: c.lambda,
            beta: c.beta,
            gamma: c.gamma,
            alpha: c.alpha,
            lr: c.lr,
            lr_new_layer_mult: c.lr_new_layer_mult,
            momentum: c.momentum,
            batch_size: c.batch_size,
            source_epochs: c.source_epochs,
            adapt_epochs: c.adapt_epochs,
            jn_samples: c.jn_samples,
            sigma: c.sigma,
            jn_target: match c.jn_target {
                JnTarget::Probs => "probs".into(),
                JnTarget::Logits => "logits".into(),
            },
            pseudo_passes: c.pseudo_passes,
            hidden_dims: c.hidden_dims,
            bottleneck_dim: c.bottleneck_dim,
            probe_points: c.probe_points,
            seed: c.seed,
        }
    }
}

impl AdaptationConfig {
    fn core(&self) -> PyResult<CoreConfig> {
        let jn_target = match self.jn_target.as_str() {
            "probs" => JnTarget::Probs,
            "logits" => JnTarget::Logits,
            other => return Err(SfdaError::new_err(format!("unknown jn_target {other:?}"))),
        };
        let c = CoreConfig {
            lambda: self.lambda_,
            beta: self.beta,
            gamma: self.gamma,
            alpha: self.alpha,
            lr: self.lr,
            lr_new_layer_mult: self.lr_new_layer_mult,
            momentum: self.momentum,
            batch_size: self.batch_size,
            source_epochs: self.source_epochs,
            adapt_epochs: self.adapt_epochs,
            jn_samples: self.jn_samples,
            sigma: self.sigma,
            jn_target,
            pseudo_passes: self.pseudo_passes,
            hidden_dims: self.hidden_dims.clone(),
            bottleneck_dim: self.bottleneck_dim,
            probe_points: self.probe_points,
            seed: self.seed,
        };
        c.validate().map_err(err)?;
        Ok(c)
    }
}

#[pymethods]
impl AdaptationConfig {
    /// Defaults, overridden by keyword arguments (`lambda_` for the JN weight).
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(py: Python<'_>, kwargs: Option<&Bound<'_, pyo3::types::PyDict>>) -> PyResult<Py<Self>> {
        let cfg = Py::new(py, Self::from(CoreConfig::default()))?;
        if let Some(kwargs) = kwargs {
            let bound = cfg.bind(py);
            for (key, value) in kwargs.iter() {
                let name: String = key.extract()?;
                if !bound.hasattr(name.as_str())? || name.starts_with('_') {
                    return Err(SfdaError::new_err(format!("unknown config field {name:?}")));
                }
                bound.setattr(name.as_str(), value)?;
            }
        }
        Ok(cfg)
    }

    fn __repr__(&self) -> String {
        format!(
            "AdaptationConfig(lambda_={}, beta={}, gamma={}, lr={}, adapt_epochs={}, seed={})",
            self.lambda_, self.beta, self.gamma, self.lr, self.adapt_epochs, self.seed
        )
    }
}

#[pyclass(module = "sfda", skip_from_py_object, frozen, get_all)]
#[derive(Clone)]
struct EpochRecord {
    epoch: usize,
    target_acc: Option<f64>,
    loss_im: f64,
    loss_ssl: f64,
    loss_jn: f64,
    loss_total: f64,
    pseudo_acc: Option<f64>,
    jn_exact_probe: f64,
    seconds: f64,
}

#[pyclass(module = "sfda", skip_from_py_object, frozen)]
struct RunMetrics {
    inner: CoreMetrics,
}

#[pymethods]
impl RunMetrics {
    #[getter]
    fn records(&self) -> Vec<EpochRecord> {
        self.inner
            .records
            .iter()
            .map(|r| EpochRecord {
                epoch: r.epoch,
                target_acc: r.target_acc,
                loss_im: r.loss_im,
                loss_ssl: r.loss_ssl,
                loss_jn: r.loss_jn,
                loss_total: r.loss_total,
                pseudo_acc: r.pseudo_acc,
                jn_exact_probe: r.jn_exact_probe,
                seconds: r.seconds,
            })
            .collect()
    }

    #[pyo3(signature = (with_timing=false))]
    fn to_csv(&self, with_timing: bool) -> String {
        self.inner.to_csv(with_timing)
    }

    fn __len__(&self) -> usize {
        self.inner.records.len()
    }
}

#[pyclass(module = "sfda", skip_from_py_object, frozen)]
#[derive(Clone)]
struct Model {
    inner: EncoderClassifier,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: EncoderClassifier::load(&path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: EncoderClassifier::from_json(text).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        self.inner.predict(&tensor(x)?).map_err(err)
    }

    fn predict_probs(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.predict_probs(&tensor(x)?).map_err(err)?))
    }

    fn encode(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.encode(&tensor(x)?).map_err(err)?))
    }

    fn evaluate(&self, data: &Dataset) -> PyResult<f64> {
        engine::evaluate(&self.inner, &data.inner).map_err(err)
    }

    /// Summed squared Frobenius norm of the input-output Jacobian of the probabilities.
    fn jn_exact(&self, x: Vec<Vec<f64>>) -> PyResult<f64> {
        losses::jn_exact(&ModelOutput::probs(&self.inner), &tensor(x)?).map_err(err)
    }

    #[pyo3(signature = (x, radius=0.05, probes=64, seed=0))]
    fn smoothness(&self, x: Vec<Vec<f64>>, radius: f64, probes: usize, seed: u64) -> PyResult<f64> {
        diagnostics::empirical_smoothness(|p| self.inner.predict_probs(p), &tensor(x)?, radius, probes, seed).map_err(err)
    }

    #[pyo3(signature = (x, passes=pseudolabel::DEFAULT_PASSES))]
    fn pseudo_labels(&self, x: Vec<Vec<f64>>, passes: usize) -> PyResult<Vec<usize>> {
        Ok(pseudolabel::pseudo_labels(&self.inner, &tensor(x)?, passes).map_err(err)?.labels)
    }

    fn classifier_equal(&self, other: &Model) -> bool {
        self.inner.classifier_params_equal(&other.inner)
    }

    #[getter]
    fn classifier_frozen(&self) -> bool {
        self.inner.frozen_classifier
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(hidden_dims={:?}, feature_dim={}, frozen={})",
            self.inner.hidden_dims(),
            self.inner.feature_dim(),
            self.inner.frozen_classifier
        )
    }
}

/// `(epoch, loss, source_acc)` per source epoch.
type History = Vec<(usize, f64, f64)>;

/// Trains a source model; returns it with its training history.
#[pyfunction]
#[pyo3(signature = (source, config=None))]
fn train_source(py: Python<'_>, source: &Dataset, config: Option<&AdaptationConfig>) -> PyResult<(Model, History)> {
    let cfg = config.map_or_else(|| Ok(CoreConfig::default()), AdaptationConfig::core)?;
    let (model, history) = py.detach(|| engine::train_source(&source.inner, &cfg)).map_err(err)?;
    let history = history.iter().map(|e| (e.epoch, e.loss, e.source_acc)).collect();
    Ok((Model { inner: model }, history))
}

/// Adapts a source model to unlabeled target data with the classifier frozen.
#[pyfunction]
#[pyo3(signature = (model, target, config=None))]
fn adapt_target(py: Python<'_>, model: &Model, target: &Dataset, config: Option<&AdaptationConfig>) -> PyResult<(Model, RunMetrics)> {
    let cfg = config.map_or_else(|| Ok(CoreConfig::default()), AdaptationConfig::core)?;
    let (adapted, metrics) = py.detach(|| engine::adapt_target(&model.inner, &target.inner, &cfg)).map_err(err)?;
    Ok((Model { inner: adapted }, RunMetrics { inner: metrics }))
}

#[pyfunction]
fn tv_discrete(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    diagnostics::tv_discrete(&distribution(p)?, &distribution(q)?).map_err(err)
}

#[pyfunction]
fn kl_discrete(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    diagnostics::kl_discrete(&distribution(p)?, &distribution(q)?).map_err(err)
}

#[pyfunction]
fn pinsker_check(p: Vec<f64>, q: Vec<f64>) -> PyResult<bool> {
    diagnostics::pinsker_check(&distribution(p)?, &distribution(q)?).map_err(err)
}

/// Right-hand side of the target-risk bound, term by term.
#[pyfunction]
#[pyo3(signature = (*, loss_bound, diameter, radius, epsilon, theta, dim, m, n, tv, source_risk))]
#[allow(clippy::too_many_arguments)]
fn bound_rhs(
    py: Python<'_>,
    loss_bound: f64,
    diameter: f64,
    radius: f64,
    epsilon: f64,
    theta: f64,
    dim: usize,
    m: u64,
    n: u64,
    tv: f64,
    source_risk: f64,
) -> PyResult<Py<pyo3::types::PyDict>> {
    let params = BoundParameters {
        loss_bound,
        diameter,
        radius,
        epsilon,
        theta,
        dim,
        m,
        n,
        tv,
        source_risk,
    };
    let r = diagnostics::bound_rhs(&params).map_err(err)?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("source_risk", r.source_risk)?;
    out.set_item("smoothness", r.smoothness)?;
    out.set_item("divergence", r.divergence)?;
    out.set_item("target_complexity", r.target_complexity)?;
    out.set_item("source_complexity", r.source_complexity)?;
    out.set_item("confidence", r.confidence)?;
    out.set_item("total", r.total)?;
    out.set_item("vacuous", r.vacuous)?;
    Ok(out.unbind())
}

#[pymodule]
pub fn sfda(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SfdaError", m.py().get_type::<SfdaError>())?;
    m.add_class::<Dataset>()?;
    m.add_class::<AdaptationConfig>()?;
    m.add_class::<EpochRecord>()?;
    m.add_class::<RunMetrics>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(train_source, m)?)?;
    m.add_function(wrap_pyfunction!(adapt_target, m)?)?;
    m.add_function(wrap_pyfunction!(tv_discrete, m)?)?;
    m.add_function(wrap_pyfunction!(kl_discrete, m)?)?;
    m.add_function(wrap_pyfunction!(pinsker_check, m)?)?;
    m.add_function(wrap_pyfunction!(bound_rhs, m)?)?;
    Ok(())
}
