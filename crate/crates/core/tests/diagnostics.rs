mod common;

use common::{rng, uniform};
use proptest::prelude::*;
use rand::Rng;
use sfda_core::diagnostics::{
    bound_rhs, empirical_smoothness, histogram, kl_discrete, pinsker_check, tv_discrete, BoundParameters,
    DiscreteDistribution, HistogramGrid,
};
use sfda_core::Tensor;

fn random_dist(r: &mut impl Rng, k: usize, sparse: bool) -> DiscreteDistribution {
    let w: Vec<f64> = (0..k)
        .map(|_| if sparse && r.random_bool(0.3) { 0.0 } else { r.random_range(0.0..1.0) })
        .collect();
    if w.iter().sum::<f64>() == 0.0 {
        let mut one = vec![0.0; k];
        one[0] = 1.0;
        return DiscreteDistribution::new(one).unwrap();
    }
    DiscreteDistribution::from_weights(&w).unwrap()
}

fn base_params() -> BoundParameters {
    BoundParameters {
        loss_bound: 1.0,
        diameter: 1.0,
        radius: 1.0,
        epsilon: 0.0,
        theta: 0.5,
        dim: 2,
        m: 10_000,
        n: 10_000,
        tv: 0.0,
        source_risk: 0.0,
    }
}

#[test]
fn tv_axioms_on_random_triples() {
    let mut r = rng(1);
    for _ in 0..500 {
        let k = r.random_range(1..10);
        let sparse = r.random_bool(0.5);
        let (p, q, s) = (random_dist(&mut r, k, sparse), random_dist(&mut r, k, sparse), random_dist(&mut r, k, sparse));
        let pq = tv_discrete(&p, &q).unwrap();
        assert_eq!(pq, tv_discrete(&q, &p).unwrap());
        assert_eq!(tv_discrete(&p, &p).unwrap(), 0.0);
        assert!((0.0..=1.0).contains(&pq));
        assert!(pq <= tv_discrete(&p, &s).unwrap() + tv_discrete(&s, &q).unwrap() + 1e-12);
    }
}

#[test]
fn pinsker_holds_on_random_pairs() {
    let mut r = rng(2);
    for i in 0..1000 {
        let k = r.random_range(2..12);
        let p = random_dist(&mut r, k, i % 2 == 0);
        let q = random_dist(&mut r, k, i % 4 == 0);
        assert!(pinsker_check(&p, &q).unwrap());
    }
}

#[test]
fn kl_of_point_mass_against_uniform_is_ln_two() {
    let p = DiscreteDistribution::new(vec![1.0, 0.0]).unwrap();
    let q = DiscreteDistribution::new(vec![0.5, 0.5]).unwrap();
    assert!((kl_discrete(&p, &q).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    assert_eq!(kl_discrete(&q, &p).unwrap(), f64::INFINITY);
    assert!(pinsker_check(&q, &p).unwrap());
}

#[test]
fn histograms_of_identical_samples_have_zero_distance() {
    let x = uniform(&mut rng(3), &[200, 2], 1.0);
    let shifted = x.map(|v| v + 10.0);
    let grid = HistogramGrid::covering(&[&x, &shifted], 8, 0.1).unwrap();
    let p = histogram(&x, &grid).unwrap();
    assert_eq!(tv_discrete(&p, &histogram(&x, &grid).unwrap()).unwrap(), 0.0);
    assert_eq!(tv_discrete(&p, &histogram(&shifted, &grid).unwrap()).unwrap(), 1.0);
}

#[test]
fn smoothness_of_linear_functional_finds_the_corner() {
    let f = |x: &Tensor| x.matmul(&Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
    let samples = uniform(&mut rng(4), &[10, 2], 1.0);
    let v = empirical_smoothness(f, &samples, 0.1, 16, 0).unwrap();
    assert!((v - 0.3).abs() < 1e-12);
    let constant = |x: &Tensor| Ok(Tensor::full(&[x.rows(), 3], 0.25));
    assert_eq!(empirical_smoothness(constant, &samples, 0.1, 16, 0).unwrap(), 0.0);
}

#[test]
fn bound_matches_independent_arithmetic() {
    let ln2 = std::f64::consts::LN_2;
    let expected = 2.0 * ((4.0 * ln2 + 2.0 * ln2) / 1e4).sqrt() + (ln2 / 2e4).sqrt();
    let report = bound_rhs(&base_params()).unwrap();
    assert!((report.total - expected).abs() <= 1e-12 * expected);
    assert!(!report.vacuous);
}

#[test]
fn bound_reduces_to_source_risk_in_the_limit() {
    let p = BoundParameters {
        theta: 1.0 - 1e-12,
        m: 1 << 60,
        n: 1 << 60,
        source_risk: 0.125,
        ..base_params()
    };
    assert!((bound_rhs(&p).unwrap().total - 0.125).abs() < 1e-8);
}

#[test]
fn overflowing_cover_term_is_flagged_vacuous() {
    let p = BoundParameters {
        epsilon: 50.0,
        diameter: 100.0,
        radius: 0.01,
        ..base_params()
    };
    let report = bound_rhs(&p).unwrap();
    assert_eq!(report.total, f64::INFINITY);
    assert!(report.vacuous);
    assert!(bound_rhs(&BoundParameters { theta: 1.0, ..base_params() }).is_err());
}

#[test]
fn bound_is_monotone_in_every_parameter() {
    let mut r = rng(5);
    for _ in 0..300 {
        let p = BoundParameters {
            loss_bound: r.random_range(0.1..3.0),
            diameter: r.random_range(0.1..5.0),
            radius: r.random_range(0.05..2.0),
            epsilon: r.random_range(0.0..0.5),
            theta: r.random_range(0.01..0.99),
            dim: r.random_range(1..6),
            m: r.random_range(10..100_000),
            n: r.random_range(10..100_000),
            tv: r.random_range(0.0..0.9),
            source_risk: r.random_range(0.0..1.0),
        };
        let base = bound_rhs(&p).unwrap().total;
        let up = |q: BoundParameters| bound_rhs(&q).unwrap().total;
        let k = r.random_range(1.01..2.0);
        assert!(up(BoundParameters { epsilon: p.epsilon * k + 0.01, ..p.clone() }) >= base);
        assert!(up(BoundParameters { tv: (p.tv + 0.05).min(1.0), ..p.clone() }) >= base);
        assert!(up(BoundParameters { diameter: p.diameter * k, ..p.clone() }) >= base);
        assert!(up(BoundParameters { loss_bound: p.loss_bound * k, ..p.clone() }) >= base);
        assert!(up(BoundParameters { m: p.m / 2, ..p.clone() }) >= base);
        assert!(up(BoundParameters { n: p.n / 2, ..p.clone() }) >= base);
        assert!(up(BoundParameters { radius: p.radius * k, ..p.clone() }) <= base);
        assert!(up(BoundParameters { theta: (p.theta * k).min(0.999), ..p.clone() }) <= base);
    }
}

proptest! {
    #[test]
    fn smoothness_of_linear_maps_grows_with_radius(seed in 0u64..500, r1 in 0.01f64..1.0, factor in 1.0f64..4.0) {
        let mut g = rng(seed);
        let w = uniform(&mut g, &[3, 2], 2.0);
        let samples = uniform(&mut g, &[5, 3], 1.0);
        let f = |x: &Tensor| x.matmul(&w);
        let small = empirical_smoothness(f, &samples, r1, 20, seed).unwrap();
        let large = empirical_smoothness(f, &samples, r1 * factor, 20, seed).unwrap();
        prop_assert!(large >= small - 1e-12);
    }
}
