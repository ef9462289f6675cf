use std::sync::OnceLock;

use glrt_core::chernoff::pairwise_index;
use glrt_core::families::{FamilyModel, ParamBox, Support};
use glrt_core::mgf::LogMgfSpec;
use glrt_core::nonsep::{euler_check, inner_inf, rate_nonsep, solve_tilt, tilted_sampler, Placement, TiltConfig, TiltedMeasure};
use glrt_core::quad;
use rand::{Rng, SeedableRng};

fn lognormal_exponential() -> (FamilyModel, FamilyModel) {
    (FamilyModel::builtin("lognormal").unwrap(), FamilyModel::builtin("exponential").unwrap())
}

/// Saddle for lognormal-vs-exponential with truth θ₀ = 1.28, b = 0.
fn example_one_tilt() -> &'static TiltedMeasure {
    static TILT: OnceLock<TiltedMeasure> = OnceLock::new();
    TILT.get_or_init(|| {
        let (g, h) = lognormal_exponential();
        solve_tilt(&g, &h, &g.space, &h.space, &[1.28], 0.0, &TiltConfig::default()).unwrap()
    })
}

fn inner(theta: f64, gamma: f64) -> f64 {
    let (g, h) = lognormal_exponential();
    let spec = LogMgfSpec::new(&g, &h, &[1.28], &[theta], &[gamma], 0.0).unwrap();
    inner_inf(&spec).unwrap().0
}

#[test]
fn saddle_sandwich() {
    let t = example_one_tilt();
    let log_m = t.log_m_dag;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    // γ† maximizes the inner value at θ†
    for _ in 0..20 {
        let gamma = (rng.random::<f64>() * 4.0 - 1.5).exp();
        assert!(inner(t.theta_dag[0], gamma) <= log_m + 1e-4);
    }
    // at any θ some γ does at least as well as M†
    let gammas: Vec<f64> = (0..=160).map(|i| (-1.0 + 2.5 * i as f64 / 160.0).exp()).collect();
    for _ in 0..20 {
        let theta = (rng.random::<f64>() * 4.0 - 1.5).exp();
        let best = gammas.iter().map(|&c| inner(theta, c)).fold(f64::NEG_INFINITY, f64::max);
        assert!(-best <= rate_nonsep(t) + 1e-4, "θ = {theta}: {} vs {}", -best, rate_nonsep(t));
    }
}

#[test]
fn truth_at_the_least_favorable_pair_reproduces_the_chernoff_index() {
    let (g, h) = lognormal_exponential();
    let t = example_one_tilt();
    let pair = pairwise_index(&g, &[1.28], &h, &t.gamma_dag).unwrap();
    assert!((rate_nonsep(t) - pair.rho).abs() < 1e-6);
    assert!((t.theta_dag[0] - 1.28).abs() < 1e-3);
    assert!(euler_check(t, &g.space, &h.space).unwrap().passed);
}

#[test]
fn weights_recover_the_truth() {
    let (g, _) = lognormal_exponential();
    let t = example_one_tilt();
    let xs = tilted_sampler(t, 100, 9).unwrap();
    for x in xs {
        let lhs = t.log_weight(x) + t.log_density(x);
        let rhs = g.log_density(&[1.28], x).unwrap();
        assert!((lhs - rhs).abs() < 1e-10 * (1.0 + rhs.abs()));
    }
}

#[test]
fn tilted_draws_pass_a_kolmogorov_smirnov_test() {
    let t = example_one_tilt();
    let n = 100_000;
    let mut xs = tilted_sampler(t, n, 21).unwrap();
    xs.sort_by(f64::total_cmp);
    let cdf = |x: f64| -> f64 {
        quad::integrate(&Support::Interval { lo: 0.0, hi: x }, |y| t.log_density(y), |_| [1.0], 1e-10)
            .unwrap()
            .log_value(0)
            .exp()
    };
    let mut d: f64 = 0.0;
    for k in (0..n).step_by(500) {
        let f = cdf(xs[k]);
        d = d.max((f - k as f64 / n as f64).abs()).max((f - (k + 1) as f64 / n as f64).abs());
    }
    assert!(d < 0.01, "D = {d}");
}

#[test]
fn both_tilts_of_a_chernoff_saddle_share_one_law() {
    let (g, h) = lognormal_exponential();
    let saddle = pairwise_index(&g, &[1.28], &h, &[1.72]).unwrap();
    let one = TiltedMeasure::type_one(&g, &h, &saddle).unwrap();
    let two = TiltedMeasure::type_two(&g, &h, &saddle).unwrap();
    for x in [0.05, 0.4, 1.0, 3.0, 12.0] {
        assert!((one.log_density(x) - two.log_density(x)).abs() < 1e-8);
    }
    assert!((rate_nonsep(&one) - saddle.rho).abs() < 1e-9);
    assert!((rate_nonsep(&two) - saddle.rho).abs() < 1e-9);
}

#[test]
fn boundary_saddle_has_outward_scores() {
    let g = FamilyModel::builtin("poisson").unwrap();
    let h = FamilyModel::builtin("geometric").unwrap();
    let tb = ParamBox::with_faces(vec![1.0], vec![50.0], vec![false], vec![true]).unwrap();
    let gb = ParamBox::with_faces(vec![0.5], vec![50.0], vec![false], vec![true]).unwrap();
    let t = solve_tilt(&g, &h, &tb, &gb, &[1.0], 0.0, &TiltConfig::default()).unwrap();
    assert!((rate_nonsep(&t) - 0.0227).abs() < 1e-3);
    let report = euler_check(&t, &tb, &gb).unwrap();
    assert!(report.passed);
    let theta = report.conditions.iter().find(|c| c.block == "theta").unwrap();
    assert_eq!(theta.placement, Placement::LowerFace);
    assert!(theta.inward <= 0.0);
}

#[test]
fn positive_drift_lowers_the_probability() {
    // a stricter threshold gives a faster decay
    let g = FamilyModel::builtin("gaussian").unwrap();
    let rate = |b: f64| {
        let t = solve_tilt(&g, &g, &ParamBox::point(&[0.0]), &ParamBox::point(&[1.0]), &[0.0], b, &TiltConfig::default()).unwrap();
        rate_nonsep(&t)
    };
    // for N(0,1) vs N(1,1), l = x − ½ − b and ρ = (½ + b)²/2
    for b in [0.0, 0.2, 0.5] {
        assert!((rate(b) - (0.5 + b) * (0.5 + b) / 2.0).abs() < 1e-8);
    }
}
