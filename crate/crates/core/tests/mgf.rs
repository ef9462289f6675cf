use glrt_core::families::FamilyModel;
use glrt_core::mgf::{evaluate, log_mgf, log_mgf_deriv, LogMgfSpec};
use proptest::prelude::*;

fn pair(gid: &str, theta: f64, hid: &str, gamma: f64) -> LogMgfSpec {
    let g = FamilyModel::builtin(gid).unwrap();
    let h = FamilyModel::builtin(hid).unwrap();
    LogMgfSpec::pairwise(&g, &[theta], &h, &[gamma]).unwrap()
}

fn example_pairs(k: usize, a: f64, b: f64) -> LogMgfSpec {
    match k {
        0 => pair("lognormal", 0.5 + a, "exponential", 0.5 + b),
        1 => pair("poisson", 1.0 + a, "geometric", 0.5 + b),
        2 => pair("gaussian", a, "gaussian", b - 1.0),
        _ => pair("bernoulli", 0.1 + 0.3 * a, "bernoulli", 0.1 + 0.3 * b),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn vanishes_at_zero_and_one(k in 0usize..4, a in 0.0f64..2.0, b in 0.0f64..2.0) {
        let s = example_pairs(k, a, b);
        prop_assert_eq!(log_mgf(&s, 0.0).unwrap(), 0.0);
        prop_assert!(log_mgf(&s, 1.0).unwrap().abs() < 1e-6);
    }

    #[test]
    fn convex_on_unit_interval(k in 0usize..4, a in 0.0f64..2.0, b in 0.0f64..2.0, z in 0.05f64..0.95) {
        let s = example_pairs(k, a, b);
        let h = 0.04;
        let second = log_mgf(&s, z + h).unwrap() - 2.0 * log_mgf(&s, z).unwrap() + log_mgf(&s, z - h).unwrap();
        prop_assert!(second >= -1e-9);
        prop_assert!(evaluate(&s, z).unwrap().d2 >= 0.0);
    }

    #[test]
    fn derivatives_match_finite_differences(k in 0usize..4, a in 0.0f64..2.0, b in 0.0f64..2.0, z in 0.1f64..0.9) {
        let s = example_pairs(k, a, b);
        let h = 1e-5;
        let fd1 = (log_mgf(&s, z + h).unwrap() - log_mgf(&s, z - h).unwrap()) / (2.0 * h);
        let fd2 = (log_mgf_deriv(&s, z + h, 1).unwrap() - log_mgf_deriv(&s, z - h, 1).unwrap()) / (2.0 * h);
        let d1 = log_mgf_deriv(&s, z, 1).unwrap();
        let d2 = log_mgf_deriv(&s, z, 2).unwrap();
        prop_assert!((fd1 - d1).abs() < 1e-6 * (1.0 + d1.abs()), "{fd1} vs {d1}");
        prop_assert!((fd2 - d2).abs() < 1e-5 * (1.0 + d2.abs()), "{fd2} vs {d2}");
    }

    #[test]
    fn swapping_reflects_the_argument(k in 0usize..4, a in 0.0f64..2.0, b in 0.0f64..2.0, z in 0.0f64..1.0) {
        // log ∫ g^{1−z} h^z is symmetric under (g, h, z) ↦ (h, g, 1 − z)
        let s = example_pairs(k, a, b);
        let t = s.swapped();
        let lhs = log_mgf(&s, z).unwrap();
        let rhs = log_mgf(&t, 1.0 - z).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-8);
    }
}

#[test]
fn lognormal_exponential_diverges_past_one() {
    // the exponential tail dominates the lognormal one once z > 1
    let s = pair("lognormal", 1.28, "exponential", 1.72);
    assert!(log_mgf(&s, 1.5).is_err());
    assert!(log_mgf(&s, 0.9).unwrap().is_finite());
}

#[test]
fn gaussian_shift_closed_form() {
    // Λ(z) = z(z − 1)Δ²/2 for unit-variance normals a distance Δ apart
    for delta in [0.5, 1.0, 2.0] {
        let s = pair("gaussian", 0.0, "gaussian", delta);
        for z in [-0.5, 0.25, 0.5, 1.5] {
            let exact = z * (z - 1.0) * delta * delta / 2.0;
            assert!((log_mgf(&s, z).unwrap() - exact).abs() < 1e-9);
        }
    }
}
