//! Log moment generating functions of per-observation log-likelihood ratios.
//!
//! For a sampling density `g_{θ₀}` and the log-ratio
//! `l(x) = log h_γ(x) − log g_θ(x) − b`, this module evaluates
//! `Λ(λ) = log E_{g_{θ₀}} exp{λ l(X)}` together with its first two
//! derivatives, which are the mean and variance of `l` under the tilted
//! density `∝ g_{θ₀} e^{λ l}`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::families::{Family, FamilyModel, Support};
use crate::quad;

/// Relative tolerance requested from the quadrature layer.
pub const QUAD_TOL: f64 = 1e-10;

/// The ingredients of one log-MGF: the sampling parameters `θ₀` of the
/// g-family, the compared pair `(θ, γ)` and the drift `b`.
#[derive(Debug, Clone)]
pub struct LogMgfSpec {
    pub gfam: Arc<dyn Family>,
    pub hfam: Arc<dyn Family>,
    pub base_params: Vec<f64>,
    pub g_params: Vec<f64>,
    pub h_params: Vec<f64>,
    pub offset_b: f64,
}

/// `Λ`, `Λ'` and `Λ''` at one `λ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogMgfValue {
    pub lambda: f64,
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

impl LogMgfSpec {
    /// Checked constructor; all parameter vectors must lie in their boxes.
    pub fn new(
        gfam: &FamilyModel,
        hfam: &FamilyModel,
        base_params: &[f64],
        g_params: &[f64],
        h_params: &[f64],
        offset_b: f64,
    ) -> Result<Self> {
        gfam.check_params(base_params)?;
        gfam.check_params(g_params)?;
        hfam.check_params(h_params)?;
        if gfam.support() != hfam.support() {
            return Err(Error::Config(format!(
                "`{}` and `{}` live on different supports",
                gfam.id(),
                hfam.id()
            )));
        }
        if !offset_b.is_finite() {
            return Err(Error::Config("offset b must be finite".into()));
        }
        Ok(Self::unchecked(gfam, hfam, base_params, g_params, h_params, offset_b))
    }

    /// Simple-vs-simple spec: sample from `g_θ`, compare `h_γ` to `g_θ`, no drift.
    pub fn pairwise(gfam: &FamilyModel, theta: &[f64], hfam: &FamilyModel, gamma: &[f64]) -> Result<Self> {
        Self::new(gfam, hfam, theta, theta, gamma, 0.0)
    }

    pub(crate) fn unchecked(
        gfam: &FamilyModel,
        hfam: &FamilyModel,
        base_params: &[f64],
        g_params: &[f64],
        h_params: &[f64],
        offset_b: f64,
    ) -> Self {
        Self {
            gfam: gfam.family.clone(),
            hfam: hfam.family.clone(),
            base_params: base_params.to_vec(),
            g_params: g_params.to_vec(),
            h_params: h_params.to_vec(),
            offset_b,
        }
    }

    pub fn is_pairwise(&self) -> bool {
        self.base_params == self.g_params && self.offset_b == 0.0
    }

    pub fn support(&self) -> Support {
        self.gfam.support()
    }

    /// Log-density of the sampling distribution `g_{θ₀}`.
    pub fn log_base(&self, x: f64) -> f64 {
        if self.gfam.in_support(x) {
            self.gfam.log_density(&self.base_params, x)
        } else {
            f64::NEG_INFINITY
        }
    }

    /// `l(x) = log h_γ(x) − log g_θ(x) − b`.
    pub fn log_ratio(&self, x: f64) -> f64 {
        self.hfam.log_density(&self.h_params, x) - self.gfam.log_density(&self.g_params, x) - self.offset_b
    }

    /// Log of the unnormalized tilted density `g_{θ₀}(x) e^{λ l(x)}`.
    pub fn log_tilted(&self, lambda: f64, x: f64) -> f64 {
        let base = self.log_base(x);
        if base == f64::NEG_INFINITY || lambda == 0.0 {
            return base;
        }
        let l = self.log_ratio(x);
        let v = base + lambda * l;
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }

    /// Spec with the roles of the two families exchanged and sampling from
    /// `h_γ`; its log-ratio is `log g_θ − log h_γ`.
    pub fn swapped(&self) -> Self {
        Self {
            gfam: self.hfam.clone(),
            hfam: self.gfam.clone(),
            base_params: self.h_params.clone(),
            g_params: self.h_params.clone(),
            h_params: self.g_params.clone(),
            offset_b: self.offset_b,
        }
    }
}

/// `Λ(λ)`, `Λ'(λ)`, `Λ''(λ)` by a single quadrature pass.
pub fn evaluate(spec: &LogMgfSpec, lambda: f64) -> Result<LogMgfValue> {
    if !lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be finite, got {lambda}")));
    }
    let r = quad::integrate(
        &spec.support(),
        |x| spec.log_tilted(lambda, x),
        |x| {
            let l = spec.log_ratio(x);
            [1.0, l, l * l]
        },
        QUAD_TOL,
    )
    .map_err(|e| match e {
        Error::Divergence { tail, context } => Error::Divergence {
            tail,
            context: format!(
                "E exp(λ l) infinite at λ = {lambda} for {} vs {} ({context})",
                spec.gfam.id(),
                spec.hfam.id()
            ),
        },
        other => other,
    })?;
    let mean = r.ratio(1);
    let d2 = (r.ratio(2) - mean * mean).max(0.0);
    Ok(LogMgfValue {
        lambda,
        value: if lambda == 0.0 { 0.0 } else { r.log_value(0) },
        d1: mean,
        d2,
    })
}

/// `Λ(λ) = log E_{g_{θ₀}} exp{λ (log h_γ − log g_θ − b)}`; exactly 0 at `λ = 0`.
pub fn log_mgf(spec: &LogMgfSpec, lambda: f64) -> Result<f64> {
    if lambda == 0.0 {
        return Ok(0.0);
    }
    Ok(evaluate(spec, lambda)?.value)
}

/// First or second derivative of [`log_mgf`] in `λ`.
pub fn log_mgf_deriv(spec: &LogMgfSpec, lambda: f64, order: u8) -> Result<f64> {
    let v = evaluate(spec, lambda)?;
    match order {
        1 => Ok(v.d1),
        2 => Ok(v.d2),
        _ => Err(Error::Config(format!("derivative order must be 1 or 2, got {order}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::FamilyModel;

    fn gaussian_spec() -> LogMgfSpec {
        let g = FamilyModel::builtin("gaussian").unwrap();
        LogMgfSpec::pairwise(&g, &[0.0], &g, &[1.0]).unwrap()
    }

    #[test]
    fn zero_at_origin_and_pairwise_one() {
        let s = gaussian_spec();
        assert_eq!(log_mgf(&s, 0.0).unwrap(), 0.0);
        assert!(log_mgf(&s, 1.0).unwrap().abs() < 1e-10);
        let ln = FamilyModel::builtin("lognormal").unwrap();
        let ex = FamilyModel::builtin("exponential").unwrap();
        let s = LogMgfSpec::pairwise(&ln, &[1.28], &ex, &[1.72]).unwrap();
        assert!(log_mgf(&s, 1.0).unwrap().abs() < 1e-9);
    }

    #[test]
    fn gaussian_closed_form() {
        // l = x - 1/2 ~ N(-1/2, 1) under N(0, 1)
        let s = gaussian_spec();
        for z in [-1.5, -0.3, 0.25, 0.5, 0.9, 2.0] {
            let v = evaluate(&s, z).unwrap();
            assert!((v.value - (z * z / 2.0 - z / 2.0)).abs() < 1e-9, "z={z}");
            assert!((v.d1 - (z - 0.5)).abs() < 1e-9);
            assert!((v.d2 - 1.0).abs() < 1e-8);
        }
        assert!((log_mgf_deriv(&s, 0.0, 1).unwrap() + 0.5).abs() < 1e-10);
    }

    #[test]
    fn degenerate_ratio_has_flat_mgf() {
        let e = FamilyModel::builtin("exponential").unwrap();
        let s = LogMgfSpec::pairwise(&e, &[2.0], &e, &[2.0]).unwrap();
        for z in [-3.0, 0.4, 5.0] {
            assert_eq!(log_mgf_deriv(&s, z, 1).unwrap(), 0.0);
            assert!(log_mgf(&s, z).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn lattice_pair() {
        let p = FamilyModel::builtin("poisson").unwrap();
        // Poisson(a) vs Poisson(c): Λ(z) = a^{1-z} c^z - (1-z) a - z c
        let (a, c): (f64, f64) = (2.0, 3.5);
        let s = LogMgfSpec::pairwise(&p, &[a], &p, &[c]).unwrap();
        for z in [0.3, 0.7, 1.8] {
            let exact = a.powf(1.0 - z) * c.powf(z) - (1.0 - z) * a - z * c;
            let got = log_mgf(&s, z).unwrap();
            assert!((got - exact).abs() < 1e-10, "z={z} got={got} exact={exact}");
        }
    }

    #[test]
    fn divergence_is_reported_with_tail() {
        let ln = FamilyModel::builtin("lognormal").unwrap();
        let ex = FamilyModel::builtin("exponential").unwrap();
        let s = LogMgfSpec::pairwise(&ln, &[1.28], &ex, &[1.72]).unwrap();
        let err = log_mgf(&s, 1.5).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    #[test]
    fn rejects_out_of_box_and_bad_order() {
        let g = FamilyModel::builtin("gaussian").unwrap();
        assert!(LogMgfSpec::pairwise(&g, &[100.0], &g, &[0.0]).is_err());
        assert!(log_mgf_deriv(&gaussian_spec(), 0.1, 3).is_err());
    }
}
