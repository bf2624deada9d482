mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use riskview::risk::{
    avar_normal, build_risk_field, inverse_erf, risk_at, signed_distance, signed_distance_stats,
};
use riskview::scene::{Lattice, Scene, Splat, Vec3};
use statrs::function::erf::erf;

use common::*;

#[test]
fn inverse_erf_matches_bisection() {
    for &y in &[0.5, -0.3, 0.9, 0.999, 1e-6] {
        let (mut lo, mut hi) = (-6.0f64, 6.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if erf(mid) < y {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let x = inverse_erf(y).unwrap();
        assert!((x - 0.5 * (lo + hi)).abs() < 1e-9, "inverse_erf({y}) = {x}");
    }
    assert!((inverse_erf(0.5).unwrap() - 0.476_936_276_2).abs() < 1e-9);
}

#[test]
fn signed_distance_moments_match_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let q = Vec3::new(0.3, -0.2, 0.5);
    let splat = Splat::new(Vec3::new(1.4, 0.9, -0.1), 0.25, 0.5, Vec3::zeros());
    let n = 1_000_000;
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            let z = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            signed_distance(&q, &splat.mu, &(splat.mu + splat.sigma * z))
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let stats = signed_distance_stats(&q, &splat);
    let se_mean = stats.stddev / (n as f64).sqrt();
    let se_sd = stats.stddev / (2.0 * n as f64).sqrt();
    assert!((mean - stats.mean).abs() < 3.0 * se_mean);
    assert!((var.sqrt() - stats.stddev).abs() < 3.0 * se_sd);
}

#[test]
fn avar_matches_tail_mean_of_samples() {
    let (mc, se) = monte_carlo_avar(2.0, 0.3, 0.05, 10_000_000, 77);
    let closed = avar_normal(2.0, 0.3, 0.05).unwrap();
    assert!(
        (closed - mc).abs() < 3.0 * se,
        "closed {closed}, sampled {mc} ± {se}"
    );
}

#[test]
fn risk_at_is_min_over_splats() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let scene = random_scene(&mut rng, 50, -1.0, 1.0);
    for _ in 0..100 {
        let q = Vec3::new(
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
        );
        let brute = scene
            .splats()
            .iter()
            .map(|s| avar_normal((s.mu - q).norm(), s.sigma, 0.05).unwrap())
            .fold(f64::INFINITY, f64::min);
        assert_eq!(risk_at(&q, &scene, 0.05).unwrap(), brute);
    }
}

#[test]
fn field_agrees_with_point_queries() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let scene = random_scene(&mut rng, 20, 0.0, 1.0);
    let lat = Lattice::new(Vec3::new(-0.2, 0.0, 0.1), 0.15, [8, 6, 7]).unwrap();
    let field = build_risk_field(&scene, &lat, 0.1).unwrap();
    assert_eq!(field.values.len(), lat.len());
    for v in 0..lat.len() {
        assert_eq!(
            field.values[v],
            risk_at(&lat.position(v), &scene, 0.1).unwrap()
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn risk_is_translation_invariant(
        seed in 0u64..1000,
        off in prop::array::uniform3(-3.0f64..3.0),
        q in prop::array::uniform3(-1.0f64..1.0),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = random_scene(&mut rng, 8, -1.0, 1.0);
        let off = Vec3::from(off);
        let q = Vec3::from(q);
        let a = risk_at(&q, &scene, 0.05).unwrap();
        let b = risk_at(&(q + off), &scene.translated(&off), 0.05).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn tighter_risk_level_is_more_conservative(
        seed in 0u64..1000,
        q in prop::array::uniform3(-1.0f64..1.0),
        e1 in 0.01f64..0.9,
        e2 in 0.01f64..0.9,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = random_scene(&mut rng, 6, -1.0, 1.0);
        let q = Vec3::from(q);
        let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
        prop_assert!(risk_at(&q, &scene, lo).unwrap() <= risk_at(&q, &scene, hi).unwrap() + 1e-12);
    }

    #[test]
    fn removing_splats_never_lowers_the_field(seed in 0u64..1000, keep in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = random_scene(&mut rng, 8, -1.0, 1.0);
        let sub = Scene::new(scene.splats()[..keep].to_vec(), *scene.bounds()).unwrap();
        let lat = Lattice::new(Vec3::repeat(-1.0), 0.5, [5, 5, 5]).unwrap();
        let full = build_risk_field(&scene, &lat, 0.05).unwrap();
        let part = build_risk_field(&sub, &lat, 0.05).unwrap();
        prop_assert!(full.values.iter().zip(&part.values).all(|(a, b)| a <= b));
    }
}
