use glrt_core::chernoff::{contour_grid, generalized_index, pairwise_index, rate_function, IndexConfig};
use glrt_core::families::{FamilyModel, ParamBox};
use glrt_core::mgf::{evaluate, LogMgfSpec};
use glrt_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn model(id: &str) -> FamilyModel {
    FamilyModel::builtin(id).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn index_is_symmetric_under_swap(theta in 0.3f64..4.0, gamma in 0.3f64..4.0) {
        let (g, h) = (model("lognormal"), model("exponential"));
        let a = pairwise_index(&g, &[theta], &h, &[gamma]).unwrap();
        let b = pairwise_index(&h, &[gamma], &g, &[theta]).unwrap();
        prop_assert!((a.rho - b.rho).abs() < 1e-6);
        prop_assert!((a.z_star - (1.0 - b.z_star)).abs() < 1e-4);
    }

    #[test]
    fn rate_function_is_convex(theta in 1.0f64..3.0, gamma in 0.6f64..2.0, frac in 0.1f64..0.8) {
        let spec = LogMgfSpec::pairwise(&model("poisson"), &[theta], &model("geometric"), &[gamma]).unwrap();
        let lo = evaluate(&spec, 0.0).unwrap().d1;
        let hi = evaluate(&spec, 0.95).unwrap().d1;
        let t = lo + frac * (hi - lo);
        let h = 0.02 * (hi - lo);
        let m = |t: f64| rate_function(&spec, t).unwrap();
        prop_assert!(m(t + h) - 2.0 * m(t) + m(t - h) >= -1e-9);
        prop_assert!(m(t) >= 0.0);
    }

    #[test]
    fn rate_function_vanishes_at_the_mean(theta in 0.3f64..4.0, gamma in 0.3f64..4.0) {
        let spec = LogMgfSpec::pairwise(&model("lognormal"), &[theta], &model("exponential"), &[gamma]).unwrap();
        let mean = evaluate(&spec, 0.0).unwrap().d1;
        prop_assert!(rate_function(&spec, mean).unwrap().abs() < 1e-8);
    }
}

#[test]
fn generalized_index_is_dominated_by_pairwise_probes() {
    let (g, h) = (model("lognormal"), model("exponential"));
    let r = generalized_index(&g, &h, &g.space, &h.space, &IndexConfig::default()).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let t: f64 = (rng.random::<f64>() * 6.8 - 3.0).exp();
        let c: f64 = (rng.random::<f64>() * 6.8 - 3.0).exp();
        let p = pairwise_index(&g, &[t], &h, &[c]).unwrap();
        assert!(r.rho <= p.rho + 1e-7, "probe ({t}, {c}) gives {} < {}", p.rho, r.rho);
    }
}

#[test]
fn bernoulli_oracle() {
    let b = model("bernoulli");
    for p in [0.1, 0.25, 0.4] {
        let q = 1.0 - p;
        let r = pairwise_index(&b, &[p], &b, &[q]).unwrap();
        let exact = -(2.0 * (p * q).sqrt()).ln();
        assert!((r.rho - exact).abs() < 1e-6);
        assert!((r.z_star - 0.5).abs() < 1e-5);
    }
}

#[test]
fn rate_beyond_attainable_range_is_an_error() {
    let b = model("bernoulli");
    let spec = LogMgfSpec::pairwise(&b, &[0.3], &b, &[0.7]).unwrap();
    assert!(matches!(rate_function(&spec, 10.0), Err(Error::Range { .. })));
}

#[test]
fn contour_minimum_is_near_the_least_favorable_pair() {
    let (g, h) = (model("lognormal"), model("exponential"));
    let axis: Vec<f64> = (0..21).map(|i| 0.8 + 0.1 * i as f64).collect();
    let grid = contour_grid(&g, &h, &axis, &axis).unwrap();
    let (i, j, v) = grid.min().unwrap();
    assert!((axis[i] - 1.28).abs() <= 0.1 && (axis[j] - 1.72).abs() <= 0.1);
    assert!((v - 0.0198).abs() < 5e-4);
}

#[test]
fn point_boxes_reproduce_pairwise() {
    let g = model("gaussian");
    let r = generalized_index(&g, &g, &ParamBox::point(&[0.0]), &ParamBox::point(&[2.0]), &IndexConfig::default()).unwrap();
    assert!((r.rho - 0.5).abs() < 1e-9);
}

#[test]
fn overlapping_boxes_are_reported_as_not_separated() {
    let g = model("gaussian");
    let space = ParamBox::new(vec![-1.0], vec![1.0]).unwrap();
    let r = generalized_index(&g, &g, &space, &space, &IndexConfig::default()).unwrap();
    let sep = r.diagnostics.separation.unwrap();
    assert!(!sep.separated && sep.min_kl < 1e-8);
    assert!(r.rho < 1e-8);
}
