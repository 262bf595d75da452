//! Training objectives and Jacobian-norm estimators.
//!
//! Every loss exists twice: a `*_node` builder that records it on a
//! [`Graph`] for training, and a value function that evaluates the same
//! nodes on a constant input. Both share one code path, so values agree
//! bit for bit.
//!
//! The Jacobian-norm (JN) term `sum_i |J(x_i)|_F^2` has three estimators:
//!
//! * [`jn_exact`]: one reverse pass per output class.
//! * [`jn_hutchinson`]: `E_v |J v|^2` with standard-normal probes, via
//!   forward-mode products.
//! * [`jn_perturbation`]: `E_z |f(x + z) - f(x)|^2 / sigma^2` with
//!   `z ~ N(0, sigma^2 I)`. First-order differentiable; the one used in
//!   training.
//!
//! Monte-Carlo draws are taken sample-major, probe-minor from a ChaCha8
//! stream seeded with the caller's seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{ColumnStats, Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{EncoderClassifier, ForwardMode, ParamGroup, Trainable};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JnEstimatorKind {
    Exact,
    Hutchinson { num_probes: usize },
    Perturbation { num_samples: usize, sigma: f64 },
}

impl JnEstimatorKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            JnEstimatorKind::Exact => Ok(()),
            JnEstimatorKind::Hutchinson { num_probes } if num_probes >= 1 => Ok(()),
            JnEstimatorKind::Perturbation { num_samples, sigma } if num_samples >= 1 && sigma > 0.0 => Ok(()),
            other => Err(Error::InvalidArgument(format!("invalid JN estimator {other:?}"))),
        }
    }
}

/// Which model output the JN term differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JnTarget {
    #[default]
    Probs,
    Logits,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// JN weight.
    pub lambda: f64,
    /// Information-maximization weight.
    pub beta: f64,
    /// Pseudo-label cross-entropy weight.
    pub gamma: f64,
    /// Label smoothing used for source training.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            beta: 1.0,
            gamma: 1.0,
            alpha: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda, self.beta, self.gamma, self.alpha];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) || self.alpha >= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and non-negative with alpha < 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// A differentiable map from `n x d` inputs to `n x K` outputs.
pub trait Differentiable {
    fn input_dim(&self) -> usize;

    /// Records the map on `g` reading from `x`. Maps with batch-dependent
    /// normalization take their statistics from the first
    /// `reference_rows` rows; row-independent maps ignore it.
    fn build_output(&self, g: &mut Graph, x: NodeId, reference_rows: usize) -> Result<NodeId>;
}

/// A model output in eval mode (row independent).
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput<'a> {
    pub model: &'a EncoderClassifier,
    pub target: JnTarget,
}

impl<'a> ModelOutput<'a> {
    pub fn probs(model: &'a EncoderClassifier) -> Self {
        Self {
            model,
            target: JnTarget::Probs,
        }
    }
}

impl Differentiable for ModelOutput<'_> {
    fn input_dim(&self) -> usize {
        self.model.input_dim
    }

    fn build_output(&self, g: &mut Graph, x: NodeId, _reference_rows: usize) -> Result<NodeId> {
        let mg = self.model.build(g, x, ForwardMode::Eval, Trainable::Nothing)?;
        Ok(match self.target {
            JnTarget::Probs => mg.probs,
            JnTarget::Logits => mg.logits,
        })
    }
}

/// `f(x) = x W^T` with `W` of shape `K x d`.
#[derive(Debug, Clone)]
pub struct LinearMap {
    pub weight: Tensor,
}

impl Differentiable for LinearMap {
    fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    fn build_output(&self, g: &mut Graph, x: NodeId, _reference_rows: usize) -> Result<NodeId> {
        let wt = g.constant(self.weight.transpose());
        g.matmul(x, wt)
    }
}

// ---- validation -----------------------------------------------------------

fn check_probs(probs: &Tensor) -> Result<()> {
    if probs.rank() != 2 || probs.rows() == 0 {
        return Err(Error::InvalidArgument(format!(
            "probabilities must be a non-empty n x K matrix, got {:?}",
            probs.shape()
        )));
    }
    for (i, row) in probs.iter_rows().enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|p| *p < 0.0) {
            return Err(Error::InvalidArgument(format!("row {i} is not a distribution (sum {s})")));
        }
    }
    Ok(())
}

fn check_labels(labels: &[usize], n: usize, num_classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!("{} labels for {} samples", labels.len(), n)));
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
        return Err(Error::LabelOutOfRange { row, label, num_classes });
    }
    Ok(())
}

// ---- graph builders -------------------------------------------------------

/// Mean over rows of `-sum_k q_k log p_k`, `q = (1 - alpha) onehot + alpha / K`.
pub fn label_smoothed_ce_node(g: &mut Graph, probs: NodeId, labels: &[usize], alpha: f64) -> Result<NodeId> {
    let shape = g.shape(probs).to_vec();
    let (n, k) = (shape[0], shape[1]);
    check_labels(labels, n, k)?;
    let mut target = Tensor::full(&[n, k], alpha / k as f64);
    for (i, &y) in labels.iter().enumerate() {
        target.row_mut(i)[y] += 1.0 - alpha;
    }
    let q = g.constant(target);
    let logp = g.log(probs);
    let weighted = g.mul(q, logp)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, -1.0 / n as f64))
}

/// `-H(mean_i p_i) + mean_i H(p_i)`.
pub fn im_loss_node(g: &mut Graph, probs: NodeId) -> Result<NodeId> {
    let n = g.shape(probs)[0];
    let marginal = g.mean_rows(probs)?;
    let log_marginal = g.log(marginal);
    let plogp_marginal = g.mul(marginal, log_marginal)?;
    let neg_marginal_entropy = g.sum(plogp_marginal);
    let logp = g.log(probs);
    let plogp = g.mul(probs, logp)?;
    let s = g.sum(plogp);
    let mean_entropy = g.scale(s, -1.0 / n as f64);
    g.add(neg_marginal_entropy, mean_entropy)
}

/// Cross-entropy against hard pseudo labels.
pub fn ssl_ce_node(g: &mut Graph, probs: NodeId, pseudo_labels: &[usize]) -> Result<NodeId> {
    label_smoothed_ce_node(g, probs, pseudo_labels, 0.0)
}

/// Perturbation JN from outputs of a stacked batch `[X; X+z_1; ...; X+z_S]`
/// (`n` rows per block). Returns `sum_i mean_s |f(x_i+z_is) - f(x_i)|^2 / sigma^2`.
pub fn perturbation_jn_node(g: &mut Graph, stacked_out: NodeId, n: usize, sigma: f64) -> Result<NodeId> {
    let total_rows = g.shape(stacked_out)[0];
    if n == 0 || !total_rows.is_multiple_of(n) || total_rows / n < 2 {
        return Err(Error::shape(
            "perturbation_jn",
            format!("{total_rows} stacked rows are not (1 + S) blocks of {n}"),
        ));
    }
    let samples = total_rows / n - 1;
    let clean = g.slice_rows(stacked_out, 0, n)?;
    let tiled = g.tile_rows(clean, samples)?;
    let perturbed = g.slice_rows(stacked_out, n, n * samples)?;
    let diff = g.sub(perturbed, tiled)?;
    let sq = g.square(diff);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / (sigma * sigma * samples as f64)))
}

fn eval_scalar(probs: &Tensor, build: impl FnOnce(&mut Graph, NodeId) -> Result<NodeId>) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let out = build(&mut g, p)?;
    g.forward(&[])?;
    Ok(g.value(out).expect("evaluated").item())
}

// ---- value functions ------------------------------------------------------

pub fn label_smoothed_ce(probs: &Tensor, labels: &[usize], alpha: f64, num_classes: usize) -> Result<f64> {
    check_probs(probs)?;
    if probs.cols() != num_classes {
        return Err(Error::InvalidArgument(format!(
            "{} probability columns for {num_classes} classes",
            probs.cols()
        )));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("smoothing {alpha} outside [0, 1)")));
    }
    eval_scalar(probs, |g, p| label_smoothed_ce_node(g, p, labels, alpha))
}

pub fn im_loss(probs: &Tensor) -> Result<f64> {
    check_probs(probs)?;
    eval_scalar(probs, im_loss_node)
}

pub fn ssl_ce(probs: &Tensor, pseudo_labels: &[usize]) -> Result<f64> {
    check_probs(probs)?;
    eval_scalar(probs, |g, p| ssl_ce_node(g, p, pseudo_labels))
}

/// Per-sample `|J(x_i)|_F^2` by one reverse pass per output coordinate.
/// Requires a row-independent map.
pub fn jn_exact_per_sample(f: &dyn Differentiable, x: &Tensor) -> Result<Vec<f64>> {
    let n = x.rows();
    let mut g = Graph::new();
    let input = g.input("x", x.shape())?;
    let out = f.build_output(&mut g, input, n)?;
    g.forward(&[("x", x)])?;
    let k = g.shape(out)[1];
    let mut per_sample = vec![0.0; n];
    for class in 0..k {
        let mut adjoint = Tensor::zeros(&[n, k]);
        for i in 0..n {
            adjoint.row_mut(i)[class] = 1.0;
        }
        let grads = g.backward(out, &adjoint)?;
        let gx = grads.get(input).expect("input gradient");
        for (i, row) in gx.iter_rows().enumerate() {
            per_sample[i] += row.iter().map(|v| v * v).sum::<f64>();
        }
    }
    Ok(per_sample)
}

/// `sum_i |J(x_i)|_F^2`.
pub fn jn_exact(f: &dyn Differentiable, x: &Tensor) -> Result<f64> {
    Ok(jn_exact_per_sample(f, x)?.iter().sum())
}

/// A Monte-Carlo estimate with its standard error over draws.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
    /// Per-draw totals over samples.
    pub draws: Vec<f64>,
}

impl MonteCarloEstimate {
    fn from_draws(draws: Vec<f64>) -> Self {
        let m = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / m;
        let std_error = if draws.len() > 1 {
            let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (m - 1.0);
            (var / m).sqrt()
        } else {
            f64::NAN
        };
        Self { mean, std_error, draws }
    }
}

/// Standard-normal draws arranged as `count` tensors of shape `n x d`,
/// consumed sample-major then probe-minor, each scaled by `scale`.
pub fn gaussian_draws(n: usize, d: usize, count: usize, scale: f64, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Tensor::zeros(&[n, d]); count];
    for i in 0..n {
        for draw in out.iter_mut() {
            for v in draw.row_mut(i) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = scale * z;
            }
        }
    }
    out
}

/// Hutchinson estimate with explicit probes (each `n x d`, one probe per sample row).
pub fn jn_hutchinson_with_probes(f: &dyn Differentiable, x: &Tensor, probes: &[Tensor]) -> Result<MonteCarloEstimate> {
    if probes.is_empty() {
        return Err(Error::InvalidArgument("at least one probe is required".into()));
    }
    let mut g = Graph::new();
    let input = g.input("x", x.shape())?;
    let out = f.build_output(&mut g, input, x.rows())?;
    let mut totals = Vec::with_capacity(probes.len());
    for probe in probes {
        let (_, jv) = g.jvp(&[("x", x)], &[("x", probe)], out)?;
        totals.push(jv.sum_squares());
    }
    Ok(MonteCarloEstimate::from_draws(totals))
}

pub fn jn_hutchinson_estimate(f: &dyn Differentiable, x: &Tensor, num_probes: usize, seed: u64) -> Result<MonteCarloEstimate> {
    JnEstimatorKind::Hutchinson { num_probes }.validate()?;
    let probes = gaussian_draws(x.rows(), x.cols(), num_probes, 1.0, seed);
    jn_hutchinson_with_probes(f, x, &probes)
}

/// `(1/P) sum_p sum_i |J(x_i) v_ip|^2`, unbiased for [`jn_exact`].
pub fn jn_hutchinson(f: &dyn Differentiable, x: &Tensor, num_probes: usize, seed: u64) -> Result<f64> {
    Ok(jn_hutchinson_estimate(f, x, num_probes, seed)?.mean)
}

/// Builds `[X; X + z_1; ...; X + z_S]`.
pub fn stack_perturbed(x: &Tensor, draws: &[Tensor]) -> Result<Tensor> {
    let shifted: Vec<Tensor> = draws.iter().map(|z| x.zip_map(z, |a, b| a + b)).collect();
    let mut parts = vec![x];
    parts.extend(shifted.iter());
    Tensor::vstack(&parts)
}

/// Perturbation JN with explicit draws, evaluated through the training graph node.
pub fn jn_perturbation_with_draws(f: &dyn Differentiable, x: &Tensor, draws: &[Tensor], sigma: f64) -> Result<f64> {
    if draws.is_empty() || sigma <= 0.0 {
        return Err(Error::InvalidArgument("perturbation JN needs sigma > 0 and at least one draw".into()));
    }
    let stacked = stack_perturbed(x, draws)?;
    let mut g = Graph::new();
    let input = g.input("x", stacked.shape())?;
    let out = f.build_output(&mut g, input, x.rows())?;
    let jn = perturbation_jn_node(&mut g, out, x.rows(), sigma)?;
    g.run(&[("x", &stacked)], jn).map(|t| t.item())
}

pub fn jn_perturbation(f: &dyn Differentiable, x: &Tensor, sigma: f64, num_samples: usize, seed: u64) -> Result<f64> {
    JnEstimatorKind::Perturbation { num_samples, sigma }.validate()?;
    let draws = gaussian_draws(x.rows(), x.cols(), num_samples, sigma, seed);
    jn_perturbation_with_draws(f, x, &draws, sigma)
}

/// Per-draw breakdown of [`jn_perturbation`] for error bars.
pub fn jn_perturbation_estimate(
    f: &dyn Differentiable,
    x: &Tensor,
    sigma: f64,
    num_samples: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    JnEstimatorKind::Perturbation { num_samples, sigma }.validate()?;
    let n = x.rows();
    let draws = gaussian_draws(n, x.cols(), num_samples, sigma, seed);
    let stacked = stack_perturbed(x, &draws)?;
    let mut g = Graph::new();
    let input = g.input("x", stacked.shape())?;
    let out_node = f.build_output(&mut g, input, n)?;
    let out = g.run(&[("x", &stacked)], out_node)?;
    let totals = (0..num_samples)
        .map(|s| {
            (0..n)
                .map(|i| {
                    out.row((s + 1) * n + i)
                        .iter()
                        .zip(out.row(i))
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / (sigma * sigma)
        })
        .collect();
    Ok(MonteCarloEstimate::from_draws(totals))
}

// ---- adaptation objective ----------------------------------------------------

/// Value and encoder gradients of `beta L_IM + gamma L_SSL + lambda L_J`.
#[derive(Debug, Clone)]
pub struct AdaptationLoss {
    pub total: f64,
    pub im: f64,
    pub ssl: f64,
    /// Batch-mean JN (unweighted); zero when `lambda == 0`.
    pub jn: f64,
    pub grads: Vec<(String, ParamGroup, Tensor)>,
    /// Batch statistics of the clean rows, for the running averages.
    pub batch_stats: ColumnStats,
}

/// Perturbation draws for one batch: `S` tensors of shape `n x d`.
#[derive(Debug, Clone)]
pub struct PerturbationDraws {
    pub draws: Vec<Tensor>,
    pub sigma: f64,
}

impl PerturbationDraws {
    pub fn sample(n: usize, d: usize, num_samples: usize, sigma: f64, seed: u64) -> Self {
        Self {
            draws: gaussian_draws(n, d, num_samples, sigma, seed),
            sigma,
        }
    }
}

/// Draws fresh perturbations from `seed` and evaluates the objective.
pub fn adaptation_loss(
    model: &EncoderClassifier,
    batch: &Tensor,
    pseudo_labels: &[usize],
    weights: &LossWeights,
    jn: &JnEstimatorKind,
    target: JnTarget,
    seed: u64,
) -> Result<AdaptationLoss> {
    jn.validate()?;
    let draws = if weights.lambda > 0.0 {
        match *jn {
            JnEstimatorKind::Perturbation { num_samples, sigma } => Some(PerturbationDraws::sample(
                batch.rows(),
                batch.cols(),
                num_samples,
                sigma,
                seed,
            )),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "the training objective needs the first-order perturbation estimator, got {other:?}"
                )))
            }
        }
    } else {
        None
    };
    adaptation_loss_with_draws(model, batch, pseudo_labels, weights, draws.as_ref(), target)
}

/// Objective with frozen perturbation draws (`None` disables the JN term).
/// Batch-norm runs in training mode on the clean rows; the classifier is constant.
pub fn adaptation_loss_with_draws(
    model: &EncoderClassifier,
    batch: &Tensor,
    pseudo_labels: &[usize],
    weights: &LossWeights,
    draws: Option<&PerturbationDraws>,
    target: JnTarget,
) -> Result<AdaptationLoss> {
    weights.validate()?;
    let n = batch.rows();
    check_labels(pseudo_labels, n, model.num_classes)?;
    let use_jn = weights.lambda > 0.0 && draws.is_some();
    let input_value = match (use_jn, draws) {
        (true, Some(d)) => stack_perturbed(batch, &d.draws)?,
        _ => batch.clone(),
    };

    let mut g = Graph::new();
    let x = g.input("x", input_value.shape())?;
    let mg = model.build(&mut g, x, ForwardMode::Train { reference_rows: n }, Trainable::FeatureExtractor)?;
    let probs = if use_jn { g.slice_rows(mg.probs, 0, n)? } else { mg.probs };

    let im = im_loss_node(&mut g, probs)?;
    let ssl = ssl_ce_node(&mut g, probs, pseudo_labels)?;
    let weighted_im = g.scale(im, weights.beta);
    let weighted_ssl = g.scale(ssl, weights.gamma);
    let mut total = g.add(weighted_im, weighted_ssl)?;
    let mut jn_mean = None;
    if let (true, Some(d)) = (use_jn, draws) {
        let out = match target {
            JnTarget::Probs => mg.probs,
            JnTarget::Logits => mg.logits,
        };
        let jn_sum = perturbation_jn_node(&mut g, out, n, d.sigma)?;
        let mean = g.scale(jn_sum, 1.0 / n as f64);
        let weighted = g.scale(mean, weights.lambda);
        total = g.add(total, weighted)?;
        jn_mean = Some(mean);
    }

    g.forward(&[("x", &input_value)])?;
    let value = |id: NodeId| g.value(id).expect("evaluated").item();
    let grads_all = g.backward(total, &Tensor::scalar(1.0))?;
    let grads = mg
        .params
        .iter()
        .map(|(name, group, id)| (name.clone(), *group, grads_all.get(*id).expect("param grad").clone()))
        .collect();
    Ok(AdaptationLoss {
        total: value(total),
        im: value(im),
        ssl: value(ssl),
        jn: jn_mean.map_or(0.0, value),
        grads,
        batch_stats: g.batch_stats(mg.batch_norm).expect("train-mode statistics").clone(),
    })
}

/// Value and gradients of the label-smoothed source loss over all parameters.
#[derive(Debug, Clone)]
pub struct SourceLoss {
    pub value: f64,
    pub grads: Vec<(String, ParamGroup, Tensor)>,
    pub batch_stats: ColumnStats,
}

pub fn source_loss(model: &EncoderClassifier, batch: &Tensor, labels: &[usize], alpha: f64) -> Result<SourceLoss> {
    let n = batch.rows();
    let mut g = Graph::new();
    let x = g.input("x", batch.shape())?;
    let mg = model.build(&mut g, x, ForwardMode::Train { reference_rows: n }, Trainable::All)?;
    let loss = label_smoothed_ce_node(&mut g, mg.probs, labels, alpha)?;
    g.forward(&[("x", batch)])?;
    let grads_all = g.backward(loss, &Tensor::scalar(1.0))?;
    Ok(SourceLoss {
        value: g.value(loss).expect("evaluated").item(),
        grads: mg
            .params
            .iter()
            .map(|(name, group, id)| (name.clone(), *group, grads_all.get(*id).expect("param grad").clone()))
            .collect(),
        batch_stats: g.batch_stats(mg.batch_norm).expect("train-mode statistics").clone(),
    })
}
