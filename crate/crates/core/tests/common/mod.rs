#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfda_core::model::EncoderClassifier;
use sfda_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_rel_err(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| rel_err(*x, *y, floor)).fold(0.0, f64::max)
}

/// Random probability rows.
pub fn random_probs(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Tensor {
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = w.iter().sum();
        rows.push(w.iter().map(|v| v / s).collect());
    }
    Tensor::from_rows(&rows).unwrap()
}

/// Pre-activations of every relu unit of the encoder, computed with plain
/// matrix arithmetic.
pub fn relu_pre_activations(model: &EncoderClassifier, x: &Tensor) -> Vec<f64> {
    let mut h = match &model.input_norm {
        Some(norm) => {
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(x.cols()) {
                for j in 0..row.len() {
                    row[j] = (row[j] - norm.mean[j]) / norm.std[j];
                }
            }
            out
        }
        None => x.clone(),
    };
    let mut pre = Vec::new();
    for layer in &model.encoder {
        let mut z = h.matmul(&layer.weight).unwrap();
        let width = z.cols();
        for row in z.data_mut().chunks_mut(width) {
            row.iter_mut().zip(layer.bias.data()).for_each(|(v, b)| *v += b);
        }
        if layer.relu {
            pre.extend_from_slice(z.data());
            h = z.map(|v| v.max(0.0));
        } else {
            h = z;
        }
    }
    pre
}

pub fn min_abs(values: &[f64]) -> f64 {
    values.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min)
}

/// A small model with nonzero biases, nontrivial batch-norm state and an
/// input standardizer.
pub fn small_model(seed: u64, input_dim: usize, hidden: &[usize], bottleneck: usize, classes: usize) -> EncoderClassifier {
    let mut r = rng(seed ^ 0x5eed);
    let mut model = EncoderClassifier::init(input_dim, hidden, bottleneck, classes, seed).unwrap();
    for name in model.named_params().into_iter().map(|(n, _, _)| n).collect::<Vec<_>>() {
        if name.ends_with("bias") || name == "bn.beta" {
            let p = model.param_mut(&name).unwrap();
            for v in p.data_mut() {
                *v = r.random_range(-0.3..0.3);
            }
        }
        if name == "bn.gamma" {
            let p = model.param_mut(&name).unwrap();
            for v in p.data_mut() {
                *v = r.random_range(0.5..1.5);
            }
        }
    }
    let bn = &mut model.bottleneck.bn;
    for v in &mut bn.running_mean {
        *v = r.random_range(-0.2..0.2);
    }
    for v in &mut bn.running_var {
        *v = r.random_range(0.5..2.0);
    }
    let norm = sfda_core::model::Standardizer {
        mean: (0..input_dim).map(|_| r.random_range(-0.5..0.5)).collect(),
        std: (0..input_dim).map(|_| r.random_range(0.5..2.0)).collect(),
    };
    model.with_input_norm(norm)
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of the adaptation objective over every trainable parameter,
/// with frozen perturbation draws. Batches whose relu inputs come near a
/// kink are redrawn.
pub fn adaptation_gradient_error(seed: u64) -> f64 {
    use sfda_core::diffcore::numeric_gradient;
    use sfda_core::losses::{adaptation_loss_with_draws, stack_perturbed, JnTarget, LossWeights, PerturbationDraws};

    let model = small_model(seed, 2, &[6, 6], 4, 3);
    let weights = LossWeights {
        lambda: 0.2,
        beta: 1.0,
        gamma: 1.0,
        alpha: 0.1,
    };
    let n = 6;
    let mut r = rng(seed.wrapping_mul(31) + 7);
    let (batch, draws) = loop {
        let batch = uniform(&mut r, &[n, 2], 1.5);
        let draws = PerturbationDraws::sample(n, 2, 2, 0.1, r.random());
        let stacked = stack_perturbed(&batch, &draws.draws).unwrap();
        if min_abs(&relu_pre_activations(&model, &stacked)) > 1e-3 {
            break (batch, draws);
        }
    };
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let loss = adaptation_loss_with_draws(&model, &batch, &labels, &weights, Some(&draws), JnTarget::Probs).unwrap();
    let mut worst: f64 = 0.0;
    for (name, _, analytic) in &loss.grads {
        let base = model.clone();
        let original = base.named_params().into_iter().find(|(n, _, _)| n == name).unwrap().2.clone();
        let numeric = numeric_gradient(
            |p| {
                let mut m = base.clone();
                *m.param_mut(name).unwrap() = p.clone();
                adaptation_loss_with_draws(&m, &batch, &labels, &weights, Some(&draws), JnTarget::Probs)
                    .unwrap()
                    .total
            },
            &original,
            1e-5,
        );
        worst = worst.max(max_rel_err(analytic, &numeric, 1e-6));
    }
    worst
}

/// Outcome of one seed of the shifted two-moons benchmark.
#[derive(Debug, Clone)]
pub struct BenchmarkSeed {
    pub seed: u64,
    pub source_only: f64,
    pub baseline: f64,
    pub jn_only: f64,
    pub full: f64,
    /// Mean per-sample exact JN on the probe set after adaptation.
    pub baseline_jn: f64,
    pub full_jn: f64,
    pub source_smoothness: f64,
    pub full_smoothness: f64,
    pub classifier_frozen: bool,
}

/// Source training plus the three adaptation arms at default settings on
/// two-moons (n = 600, 30 degree rotation, noise 0.1).
pub fn benchmark_seed(seed: u64) -> BenchmarkSeed {
    use sfda_core::data::two_moons_shift;
    use sfda_core::diagnostics::empirical_smoothness;
    use sfda_core::engine::{adapt_target, evaluate, probe_set, train_source, AdaptationConfig};

    let (source, target) = two_moons_shift(600, 0.1, 30.0, seed).unwrap();
    let base = AdaptationConfig {
        seed,
        ..AdaptationConfig::default()
    };
    let (model, _) = train_source(&source, &base).unwrap();
    let run = |lambda: f64, beta: f64, gamma: f64| {
        let cfg = AdaptationConfig {
            lambda,
            beta,
            gamma,
            ..base.clone()
        };
        let (adapted, metrics) = adapt_target(&model, &target, &cfg).unwrap();
        let frozen = adapted.classifier_params_equal(&model);
        (adapted, metrics.last().unwrap().clone(), frozen)
    };
    let (_, shot, f1) = run(0.0, 1.0, 1.0);
    let (_, jn_only, f2) = run(base.lambda, 0.0, 0.0);
    let (full_model, full, f3) = run(base.lambda, 1.0, 1.0);
    let probes = probe_set(&target.features, base.probe_points, seed).unwrap();
    let smooth = |m: &EncoderClassifier| empirical_smoothness(|x| m.predict_probs(x), &probes, 0.05, 16, seed).unwrap();
    BenchmarkSeed {
        seed,
        source_only: evaluate(&model, &target).unwrap(),
        baseline: shot.target_acc.unwrap(),
        jn_only: jn_only.target_acc.unwrap(),
        full: full.target_acc.unwrap(),
        baseline_jn: shot.jn_exact_probe,
        full_jn: full.jn_exact_probe,
        source_smoothness: smooth(&model),
        full_smoothness: smooth(&full_model),
        classifier_frozen: f1 && f2 && f3,
    }
}

/// The five paired seeds, run concurrently.
pub fn benchmark() -> Vec<BenchmarkSeed> {
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..5).map(|seed| s.spawn(move || benchmark_seed(seed))).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn oracle_cosine(u: &[f64], v: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut uu = 0.0;
    let mut vv = 0.0;
    for j in 0..u.len() {
        dot += u[j] * v[j];
        uu += u[j] * u[j];
        vv += v[j] * v[j];
    }
    1.0 - dot / (uu.sqrt() * vv.sqrt()).max(1e-12)
}

pub fn oracle_soft(features: &Tensor, probs: &Tensor) -> (Vec<Vec<f64>>, Vec<bool>) {
    let (n, p, k) = (features.rows(), features.cols(), probs.cols());
    let mut centroids = vec![vec![0.0; p]; k];
    let mut valid = vec![false; k];
    for c in 0..k {
        let mass: f64 = (0..n).map(|i| probs.get(i, c)).sum();
        valid[c] = mass >= 1e-8;
        if valid[c] {
            for j in 0..p {
                centroids[c][j] = (0..n).map(|i| probs.get(i, c) * features.get(i, j)).sum::<f64>() / mass;
            }
        }
    }
    (centroids, valid)
}

pub fn oracle_assign(features: &Tensor, centroids: &[Vec<f64>], valid: &[bool]) -> Vec<usize> {
    features
        .iter_rows()
        .map(|f| {
            let distances: Vec<f64> = centroids.iter().map(|c| oracle_cosine(f, c)).collect();
            let best = (0..centroids.len())
                .filter(|&c| valid[c])
                .map(|c| distances[c])
                .fold(f64::INFINITY, f64::min);
            (0..centroids.len()).find(|&c| valid[c] && distances[c] == best).unwrap()
        })
        .collect()
}

pub fn oracle_hard(features: &Tensor, labels: &[usize], fallback: &[Vec<f64>]) -> Vec<Vec<f64>> {
    fallback
        .iter()
        .enumerate()
        .map(|(c, prev)| {
            let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            if members.is_empty() {
                prev.clone()
            } else {
                (0..features.cols())
                    .map(|j| members.iter().map(|&i| features.get(i, j)).sum::<f64>() / members.len() as f64)
                    .collect()
            }
        })
        .collect()
}

pub fn close(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + x.abs()))
}

/// Random pseudo-labeling instance with some classes starved of probability mass.
pub fn pseudo_instance(seed: u64) -> (Tensor, Tensor) {
    let mut r = rng(seed);
    let n = r.random_range(1..=20);
    let k = r.random_range(1..=4);
    let p = r.random_range(1..=4);
    let integer_grid = seed.is_multiple_of(3);
    let features = if integer_grid {
        Tensor::new(vec![n, p], (0..n * p).map(|_| f64::from(r.random_range(-2i8..=2))).collect()).unwrap()
    } else {
        uniform(&mut r, &[n, p], 3.0)
    };
    let dead = if k > 1 { r.random_range(0..=k) } else { k };
    let mut rows = Vec::new();
    for _ in 0..n {
        let w: Vec<f64> = (0..k).map(|c| if c == dead { 0.0 } else { r.random_range(0.0..1.0) + 1e-3 }).collect();
        let s: f64 = w.iter().sum();
        rows.push(w.iter().map(|v| v / s).collect());
    }
    (features, Tensor::from_rows(&rows).unwrap())
}
