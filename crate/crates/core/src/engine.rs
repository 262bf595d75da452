//! Source training, target adaptation and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::losses::{adaptation_loss, jn_exact, source_loss, JnEstimatorKind, JnTarget, LossWeights, ModelOutput};
use crate::model::{EncoderClassifier, ParamGroup};
use crate::pseudolabel::{pseudo_labels, DEFAULT_PASSES};
use crate::tensor::Tensor;

/// Fixed offsets added to the run seed for each consumer of randomness.
pub mod seeds {
    pub const MODEL_INIT: u64 = 11;
    pub const SOURCE_SHUFFLE: u64 = 23;
    pub const TARGET_SHUFFLE: u64 = 37;
    pub const PERTURBATION: u64 = 41;
    pub const PROBE_SET: u64 = 53;
}

fn offset(seed: u64, stream: u64) -> u64 {
    seed.wrapping_add(stream)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub lr: f64,
    pub lr_new_layer_mult: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub source_epochs: usize,
    pub adapt_epochs: usize,
    /// Perturbation draws per sample in the training objective.
    pub jn_samples: usize,
    /// Perturbation scale; `None` means 0.1 times the mean per-feature
    /// standard deviation of the target data.
    pub sigma: Option<f64>,
    pub jn_target: JnTarget,
    pub pseudo_passes: usize,
    pub hidden_dims: Vec<usize>,
    pub bottleneck_dim: usize,
    /// Size of the fixed target subset on which the exact JN is tracked.
    pub probe_points: usize,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda: w.lambda,
            beta: w.beta,
            gamma: w.gamma,
            alpha: w.alpha,
            lr: 0.01,
            lr_new_layer_mult: 10.0,
            momentum: 0.9,
            batch_size: 64,
            source_epochs: 50,
            adapt_epochs: 30,
            jn_samples: 1,
            sigma: None,
            jn_target: JnTarget::Probs,
            pseudo_passes: DEFAULT_PASSES,
            hidden_dims: vec![64, 64],
            bottleneck_dim: 16,
            probe_points: 100,
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            beta: self.beta,
            gamma: self.gamma,
            alpha: self.alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_new_layer_mult > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.source_epochs == 0 || self.adapt_epochs == 0 {
            return bad("batch size and epoch counts must be at least 1");
        }
        if self.jn_samples == 0 || self.pseudo_passes == 0 {
            return bad("jn_samples and pseudo_passes must be at least 1");
        }
        if self.sigma.is_some_and(|s| !(s > 0.0)) {
            return bad("sigma must be positive");
        }
        if self.bottleneck_dim == 0 || self.hidden_dims.contains(&0) {
            return bad("layer widths must be at least 1");
        }
        Ok(())
    }

    /// Adaptation run without the JN term.
    pub fn is_baseline(&self) -> bool {
        self.lambda == 0.0
    }
}

/// `v <- momentum v + g; p <- p - lr v`.
pub fn sgd_momentum_step(param: &mut Tensor, grad: &Tensor, velocity: &mut Tensor, lr: f64, momentum: f64) {
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Heavy-ball SGD with a learning-rate multiplier for the new layers.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub new_layer_mult: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, new_layer_mult: f64) -> Self {
        Self {
            lr,
            momentum,
            new_layer_mult,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one step; frozen classifier parameters are never touched.
    pub fn step(&mut self, model: &mut EncoderClassifier, grads: &[(String, ParamGroup, Tensor)]) -> Result<()> {
        let frozen = model.frozen_classifier;
        for (name, group, grad) in grads {
            if frozen && *group == ParamGroup::Classifier {
                continue;
            }
            let lr = if group.is_new_layer() {
                self.lr * self.new_layer_mult
            } else {
                self.lr
            };
            let param = model
                .param_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
            let velocity = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            sgd_momentum_step(param, grad, velocity, lr, self.momentum);
        }
        Ok(())
    }
}

/// Fraction of rows whose predicted class matches the label.
pub fn evaluate(model: &EncoderClassifier, ds: &Dataset) -> Result<f64> {
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("evaluation needs a labeled dataset".into()))?;
    let predicted = model.predict(&ds.features)?;
    Ok(accuracy(&predicted, labels))
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub source_acc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub target_acc: Option<f64>,
    pub loss_im: f64,
    pub loss_ssl: f64,
    pub loss_jn: f64,
    /// Mean weighted objective over the epoch's batches.
    pub loss_total: f64,
    pub pseudo_acc: Option<f64>,
    /// Mean per-sample exact JN on the fixed probe subset, after the epoch.
    pub jn_exact_probe: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<EpochRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunMetrics {
    pub const CSV_HEADER: &'static str = "epoch,target_acc,loss_im,loss_ssl,loss_jn,pseudo_acc,jn_exact_probe,seconds";

    /// Per-epoch CSV. Wall-clock seconds are left blank unless `with_timing`,
    /// so that repeated runs produce identical files.
    pub fn to_csv(&self, with_timing: bool) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let seconds = if with_timing { r.seconds.to_string() } else { String::new() };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.epoch,
                opt(r.target_acc),
                r.loss_im,
                r.loss_ssl,
                r.loss_jn,
                opt(r.pseudo_acc),
                r.jn_exact_probe,
                seconds
            );
        }
        out
    }

    /// `epoch,seconds` rows for the timing sidecar.
    pub fn timing_csv(&self) -> String {
        let mut out = String::from("epoch,seconds\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{}", r.epoch, r.seconds);
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

fn check_finite(value: f64, epoch: usize, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            detail: format!("{what} became {value}"),
        })
    }
}

/// Trains every parameter on labeled source data with label smoothing.
pub fn train_source(source: &Dataset, config: &AdaptationConfig) -> Result<(EncoderClassifier, Vec<SourceEpoch>)> {
    config.validate()?;
    let labels = source
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("source training needs labels".into()))?;
    if source.is_empty() || source.num_classes == 0 {
        return Err(Error::InvalidArgument("source dataset is empty".into()));
    }
    let mut model = EncoderClassifier::init(
        source.dim(),
        &config.hidden_dims,
        config.bottleneck_dim,
        source.num_classes,
        offset(config.seed, seeds::MODEL_INIT),
    )?
    .with_input_norm(crate::model::Standardizer::fit(&source.features));
    let mut sgd = Sgd::new(config.lr, config.momentum, config.lr_new_layer_mult);
    let mut history = Vec::with_capacity(config.source_epochs);
    for epoch in 1..=config.source_epochs {
        let start = Instant::now();
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        for idx in batches(source.len(), config.batch_size, offset(config.seed, seeds::SOURCE_SHUFFLE), epoch as u64)? {
            if idx.len() < 2 {
                continue;
            }
            let xb = source.features.select_rows(&idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let loss = source_loss(&model, &xb, &yb, config.alpha)?;
            check_finite(loss.value, epoch, "source loss")?;
            sgd.step(&mut model, &loss.grads)?;
            model.update_running_stats(&loss.batch_stats);
            loss_sum += loss.value;
            steps += 1;
        }
        let source_acc = evaluate(&model, source)?;
        history.push(SourceEpoch {
            epoch,
            loss: loss_sum / steps.max(1) as f64,
            source_acc,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((model, history))
}

/// `0.1 x` the mean per-feature standard deviation.
pub fn default_sigma(x: &Tensor) -> f64 {
    let std = crate::model::Standardizer::fit(x).std;
    0.1 * std.iter().sum::<f64>() / std.len() as f64
}

/// Fixed target subset used to track the exact JN across epochs and runs.
pub fn probe_set(target: &Tensor, points: usize, seed: u64) -> Result<Tensor> {
    let order = batches(target.rows(), target.rows().max(1), offset(seed, seeds::PROBE_SET), 0)?;
    let idx: Vec<usize> = order.into_iter().flatten().take(points.min(target.rows())).collect();
    Ok(target.select_rows(&idx))
}

fn exact_probe_jn(model: &EncoderClassifier, probes: &Tensor, target: JnTarget) -> Result<f64> {
    if probes.rows() == 0 {
        return Ok(0.0);
    }
    let f = ModelOutput { model, target };
    Ok(jn_exact(&f, probes)? / probes.rows() as f64)
}

/// Fine-tunes the feature extractor on unlabeled target data with the
/// classifier frozen. Target labels, when present, only feed the metrics.
pub fn adapt_target(
    source_model: &EncoderClassifier,
    target: &Dataset,
    config: &AdaptationConfig,
) -> Result<(EncoderClassifier, RunMetrics)> {
    config.validate()?;
    if target.is_empty() {
        return Err(Error::InvalidArgument("target dataset is empty".into()));
    }
    let x = &target.features;
    let mut model = source_model.clone();
    model.set_classifier_frozen(true);
    let weights = config.weights();
    let sigma = config.sigma.unwrap_or_else(|| default_sigma(x));
    let jn = JnEstimatorKind::Perturbation {
        num_samples: config.jn_samples,
        sigma,
    };
    let probes = probe_set(x, config.probe_points, config.seed)?;
    let idle = weights.lambda == 0.0 && weights.beta == 0.0 && weights.gamma == 0.0;
    let mut sgd = Sgd::new(config.lr, config.momentum, config.lr_new_layer_mult);
    let mut metrics = RunMetrics::default();

    for epoch in 1..=config.adapt_epochs {
        let start = Instant::now();
        let pl = pseudo_labels(&model, x, config.pseudo_passes)?;
        let pseudo_acc = target.labels.as_ref().map(|y| accuracy(&pl.labels, y));
        let (mut im, mut ssl, mut jn_sum, mut total, mut steps) = (0.0, 0.0, 0.0, 0.0, 0usize);
        let epoch_batches = batches(target.len(), config.batch_size, offset(config.seed, seeds::TARGET_SHUFFLE), epoch as u64)?;
        for (step, idx) in epoch_batches.iter().enumerate() {
            if idx.len() < 2 || idle {
                continue;
            }
            let xb = x.select_rows(idx);
            let yb: Vec<usize> = idx.iter().map(|&i| pl.labels[i]).collect();
            let draw_seed = offset(config.seed, seeds::PERTURBATION)
                .wrapping_mul(1_000_003)
                .wrapping_add((epoch as u64) << 20 | step as u64);
            let loss = adaptation_loss(&model, &xb, &yb, &weights, &jn, config.jn_target, draw_seed)?;
            check_finite(loss.total, epoch, "adaptation loss")?;
            sgd.step(&mut model, &loss.grads)?;
            model.update_running_stats(&loss.batch_stats);
            im += loss.im;
            ssl += loss.ssl;
            jn_sum += loss.jn;
            total += loss.total;
            steps += 1;
        }
        let denom = steps.max(1) as f64;
        let target_acc = match &target.labels {
            Some(_) => Some(evaluate(&model, target)?),
            None => None,
        };
        metrics.records.push(EpochRecord {
            epoch,
            target_acc,
            loss_im: im / denom,
            loss_ssl: ssl / denom,
            loss_jn: jn_sum / denom,
            loss_total: total / denom,
            pseudo_acc,
            jn_exact_probe: exact_probe_jn(&model, &probes, config.jn_target)?,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((model, metrics))
}
