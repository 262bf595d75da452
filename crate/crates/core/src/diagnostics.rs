//! Numeric checks of the smoothness generalization bound.
//!
//! Discrete total-variation and KL divergences, histogram discretization of
//! point clouds, a probing lower estimate of model smoothness, and the
//! term-by-term evaluation of the target-risk bound
//!
//! ```text
//! E_Q(f) <= E_P(f) + 2 eps + 2 M TV(P, Q)
//!         + M sqrt(((2d)^(2 eps^2 D / r^2 + 1) ln 2 + 2 ln(1/theta)) / m)
//!         + M sqrt(((2d)^(2 eps^2 D / r^2 + 1) ln 2 + 2 ln(1/theta)) / n)
//!         + M sqrt(ln(1/theta) / (2m))
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Most input dimensions whose sign corners are enumerated exhaustively.
pub const MAX_CORNER_DIMS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    masses: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(masses: Vec<f64>) -> Result<Self> {
        if masses.is_empty() || masses.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument("masses must be finite and non-negative".into()));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("masses sum to {total}, not 1")));
        }
        Ok(Self { masses })
    }

    /// Normalizes non-negative weights with a positive total.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidArgument("weights must be non-negative with positive total".into()));
        }
        Ok(Self {
            masses: weights.iter().map(|w| w / total).collect(),
        })
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }
}

fn same_support(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::InvalidArgument(format!(
            "support sizes differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

/// `0.5 * sum |p_i - q_i|`.
pub fn tv_discrete(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    same_support(p, q)?;
    let tv = 0.5 * p.masses.iter().zip(&q.masses).map(|(a, b)| (a - b).abs()).sum::<f64>();
    Ok(tv.min(1.0))
}

/// Natural-log KL divergence; `+inf` when `q` misses mass of `p`.
pub fn kl_discrete(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    same_support(p, q)?;
    let mut kl = 0.0;
    for (&a, &b) in p.masses.iter().zip(&q.masses) {
        if a > 0.0 {
            if b <= 0.0 {
                return Ok(f64::INFINITY);
            }
            kl += a * (a / b).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// `TV(p, q) <= sqrt(KL(p, q) / 2)` up to `1e-12`.
pub fn pinsker_check(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<bool> {
    let tv = tv_discrete(p, q)?;
    let kl = kl_discrete(p, q)?;
    Ok(kl.is_infinite() || tv <= (kl / 2.0).sqrt() + 1e-12)
}

/// Regular grid over a box; points outside are clamped into the edge cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramGrid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub bins: usize,
}

impl HistogramGrid {
    /// Bounding box of all rows of `parts`, padded by `margin` on each side.
    pub fn covering(parts: &[&Tensor], bins: usize, margin: f64) -> Result<Self> {
        let d = parts.first().map_or(0, |t| t.cols());
        if d == 0 || bins == 0 {
            return Err(Error::InvalidArgument("grid needs at least one dimension and bin".into()));
        }
        let mut lower = vec![f64::INFINITY; d];
        let mut upper = vec![f64::NEG_INFINITY; d];
        for t in parts {
            for row in t.iter_rows() {
                for j in 0..d {
                    lower[j] = lower[j].min(row[j]);
                    upper[j] = upper[j].max(row[j]);
                }
            }
        }
        for j in 0..d {
            lower[j] -= margin;
            upper[j] += margin;
            if upper[j] <= lower[j] {
                upper[j] = lower[j] + 1.0;
            }
        }
        Ok(Self { lower, upper, bins })
    }

    fn cell(&self, x: &[f64]) -> usize {
        x.iter().enumerate().fold(0, |acc, (j, &v)| {
            let t = (v - self.lower[j]) / (self.upper[j] - self.lower[j]);
            let b = ((t * self.bins as f64).floor().max(0.0) as usize).min(self.bins - 1);
            acc * self.bins + b
        })
    }

    pub fn num_cells(&self) -> usize {
        self.bins.pow(self.lower.len() as u32)
    }
}

/// Empirical cell frequencies of the rows of `points`.
pub fn histogram(points: &Tensor, grid: &HistogramGrid) -> Result<DiscreteDistribution> {
    if points.cols() != grid.lower.len() || points.rows() == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot bin {:?} points on a {}-dimensional grid",
            points.shape(),
            grid.lower.len()
        )));
    }
    let mut counts = vec![0.0; grid.num_cells()];
    for row in points.iter_rows() {
        counts[grid.cell(row)] += 1.0;
    }
    DiscreteDistribution::from_weights(&counts)
}

/// Sign corners of the unit l-infinity ball, plus uniform interior points,
/// in unit scale (`count x d`).
pub fn smoothness_probes(d: usize, probes_per_sample: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    if d <= MAX_CORNER_DIMS {
        for mask in 0..(1usize << d) {
            rows.push((0..d).map(|j| if mask >> j & 1 == 1 { 1.0 } else { -1.0 }).collect::<Vec<_>>());
        }
    } else {
        for _ in 0..(1usize << MAX_CORNER_DIMS) {
            rows.push((0..d).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect());
        }
    }
    while rows.len() < probes_per_sample {
        rows.push((0..d).map(|_| rng.random_range(-1.0..=1.0)).collect());
    }
    Tensor::from_rows(&rows).expect("rectangular probes")
}

/// Mean over samples of `max_delta |f(x + delta) - f(x)|` over the probe set
/// scaled to radius `r`. A lower estimate of the expected supremum.
pub fn empirical_smoothness(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    samples: &Tensor,
    r: f64,
    probes_per_sample: usize,
    seed: u64,
) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {r}")));
    }
    let (n, d) = (samples.rows(), samples.cols());
    if n == 0 {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let probes = smoothness_probes(d, probes_per_sample, seed);
    let base = f(samples)?;
    let mut total = 0.0;
    for i in 0..n {
        let x = samples.row(i);
        let mut shifted = probes.map(|v| v * r);
        for row in shifted.data_mut().chunks_mut(d) {
            row.iter_mut().zip(x).for_each(|(a, b)| *a += b);
        }
        let out = f(&shifted)?;
        let fx = base.row(i);
        let worst = out
            .iter_rows()
            .map(|o| o.iter().zip(fx).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        total += worst;
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundParameters {
    /// Upper bound `M` of the loss.
    pub loss_bound: f64,
    /// Domain diameter `D`.
    pub diameter: f64,
    pub radius: f64,
    pub epsilon: f64,
    pub theta: f64,
    pub dim: usize,
    /// Target sample count.
    pub m: u64,
    /// Source sample count.
    pub n: u64,
    pub tv: f64,
    pub source_risk: f64,
}

impl BoundParameters {
    pub fn validate(&self) -> Result<()> {
        let ok = self.loss_bound > 0.0
            && self.diameter > 0.0
            && self.radius > 0.0
            && self.epsilon >= 0.0
            && self.theta > 0.0
            && self.theta < 1.0
            && self.dim >= 1
            && self.m >= 1
            && self.n >= 1
            && (0.0..=1.0).contains(&self.tv)
            && self.source_risk >= 0.0
            && self.epsilon.is_finite()
            && self.diameter.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid bound parameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub source_risk: f64,
    /// `2 eps`.
    pub smoothness: f64,
    /// `2 M TV`.
    pub divergence: f64,
    /// Covering-number term over the `m` target samples.
    pub target_complexity: f64,
    /// Covering-number term over the `n` source samples.
    pub source_complexity: f64,
    /// `M sqrt(ln(1/theta) / 2m)`.
    pub confidence: f64,
    pub total: f64,
    /// The bound is infinite or exceeds the trivial bound `M`.
    pub vacuous: bool,
}

pub fn bound_rhs(params: &BoundParameters) -> Result<BoundReport> {
    params.validate()?;
    let p = params;
    let exponent = 2.0 * p.epsilon * p.epsilon * p.diameter / (p.radius * p.radius) + 1.0;
    let cover = (exponent * (2.0 * p.dim as f64).ln()).exp();
    let log_inv_theta = (1.0 / p.theta).ln();
    let numerator = cover * std::f64::consts::LN_2 + 2.0 * log_inv_theta;
    let complexity = |count: u64| {
        if numerator.is_finite() {
            p.loss_bound * (numerator / count as f64).sqrt()
        } else {
            f64::INFINITY
        }
    };
    let target_complexity = complexity(p.m);
    let source_complexity = complexity(p.n);
    let smoothness = 2.0 * p.epsilon;
    let divergence = 2.0 * p.loss_bound * p.tv;
    let confidence = p.loss_bound * (log_inv_theta / (2.0 * p.m as f64)).sqrt();
    let total = p.source_risk + smoothness + divergence + target_complexity + source_complexity + confidence;
    Ok(BoundReport {
        source_risk: p.source_risk,
        smoothness,
        divergence,
        target_complexity,
        source_complexity,
        confidence,
        total,
        vacuous: !total.is_finite() || total > p.loss_bound,
    })
}
