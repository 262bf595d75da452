//! Nearest-centroid pseudo labels.
//!
//! Pass 0 weights every feature by its predicted class probabilities to get
//! soft centroids and assigns each sample to the closest one by cosine
//! distance. Each further pass recomputes hard centroids from the previous
//! assignment and assigns again.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EncoderClassifier;
use crate::tensor::Tensor;

const COSINE_FLOOR: f64 = 1e-12;
const MIN_CLASS_MASS: f64 = 1e-8;

/// Number of assignment passes used by default (soft then one hard refinement).
pub const DEFAULT_PASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidSet {
    /// `K x p`.
    pub centroids: Tensor,
    pub valid: Vec<bool>,
}

impl CentroidSet {
    pub fn num_classes(&self) -> usize {
        self.valid.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    /// Index of the pass that produced the labels (0 for the soft pass).
    pub pass_id: usize,
}

/// `1 - u.v / max(|u||v|, 1e-12)`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    1.0 - dot / (nu * nv).max(COSINE_FLOOR)
}

/// Probability-weighted class means.
pub fn soft_centroids(features: &Tensor, probs: &Tensor) -> Result<CentroidSet> {
    let (n, p) = (features.rows(), features.cols());
    if probs.rows() != n {
        return Err(Error::shape(
            "soft_centroids",
            format!("{} feature rows but {} probability rows", n, probs.rows()),
        ));
    }
    let k = probs.cols();
    let mut sums = Tensor::zeros(&[k, p]);
    let mut mass = vec![0.0; k];
    for (feat, pr) in features.iter_rows().zip(probs.iter_rows()) {
        for c in 0..k {
            mass[c] += pr[c];
            for (s, f) in sums.row_mut(c).iter_mut().zip(feat) {
                *s += pr[c] * f;
            }
        }
    }
    let valid: Vec<bool> = mass.iter().map(|&m| m >= MIN_CLASS_MASS).collect();
    if !valid.iter().any(|&v| v) {
        return Err(Error::DegenerateCentroids("no class has probability mass".into()));
    }
    for c in 0..k {
        if valid[c] {
            sums.row_mut(c).iter_mut().for_each(|s| *s /= mass[c]);
        } else {
            sums.row_mut(c).iter_mut().for_each(|s| *s = 0.0);
        }
    }
    Ok(CentroidSet {
        centroids: sums,
        valid,
    })
}

/// Closest valid centroid per sample; ties go to the smaller class index.
pub fn assign_nearest(features: &Tensor, centroids: &CentroidSet) -> Result<PseudoLabels> {
    if !centroids.valid.iter().any(|&v| v) {
        return Err(Error::DegenerateCentroids("no valid centroid".into()));
    }
    if features.cols() != centroids.centroids.cols() {
        return Err(Error::shape(
            "assign_nearest",
            format!(
                "features have {} columns, centroids {}",
                features.cols(),
                centroids.centroids.cols()
            ),
        ));
    }
    let labels = features
        .iter_rows()
        .map(|feat| {
            let mut best: Option<(usize, f64)> = None;
            for (c, _) in centroids.valid.iter().enumerate().filter(|(_, &v)| v) {
                let d = cosine_distance(feat, centroids.centroids.row(c));
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((c, d));
                }
            }
            best.expect("a valid centroid").0
        })
        .collect();
    Ok(PseudoLabels { labels, pass_id: 0 })
}

/// Per-class means under `labels`; classes without members keep their
/// centroid from `fallback`.
pub fn hard_centroids(features: &Tensor, labels: &PseudoLabels, fallback: &CentroidSet) -> Result<CentroidSet> {
    let k = fallback.num_classes();
    let p = features.cols();
    if labels.labels.len() != features.rows() {
        return Err(Error::shape(
            "hard_centroids",
            format!("{} labels for {} features", labels.labels.len(), features.rows()),
        ));
    }
    let mut sums = Tensor::zeros(&[k, p]);
    let mut counts = vec![0usize; k];
    for (i, (&y, feat)) in labels.labels.iter().zip(features.iter_rows()).enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange {
                row: i,
                label: y,
                num_classes: k,
            });
        }
        counts[y] += 1;
        sums.row_mut(y).iter_mut().zip(feat).for_each(|(s, f)| *s += f);
    }
    let mut valid = fallback.valid.clone();
    for c in 0..k {
        if counts[c] > 0 {
            sums.row_mut(c).iter_mut().for_each(|s| *s /= counts[c] as f64);
            valid[c] = true;
        } else {
            sums.row_mut(c).copy_from_slice(fallback.centroids.row(c));
        }
    }
    Ok(CentroidSet { centroids: sums, valid })
}

/// Runs `passes` assignment passes (at least one) on precomputed features and probabilities.
pub fn pseudo_labels_from(features: &Tensor, probs: &Tensor, passes: usize) -> Result<PseudoLabels> {
    let soft = soft_centroids(features, probs)?;
    let mut labels = assign_nearest(features, &soft)?;
    for pass in 1..passes.max(1) {
        let centroids = hard_centroids(features, &labels, &soft)?;
        labels = assign_nearest(features, &centroids)?;
        labels.pass_id = pass;
    }
    Ok(labels)
}

/// Pseudo labels for `x` from eval-mode features and probabilities of `model`.
pub fn pseudo_labels(model: &EncoderClassifier, x: &Tensor, passes: usize) -> Result<PseudoLabels> {
    let features = model.encode(x)?;
    let probs = model.predict_probs(x)?;
    pseudo_labels_from(&features, &probs, passes)
}
