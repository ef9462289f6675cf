//! Parametric density families on a one-dimensional support.
//!
//! A [`Family`] knows its log-density, score, sampler and (when available)
//! closed-form maximum likelihood estimator. A [`FamilyModel`] pairs a
//! family with the parameter box it is restricted to. Unbounded parameter
//! spaces are truncated to finite boxes; faces created by truncation are
//! marked artificial so optimizers landing near them can be flagged.

use std::fmt::Debug;
use std::sync::Arc;

use rand::RngCore;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::quad;

/// Default truncation for positive scale parameters.
pub const DEFAULT_SCALE_BOX: (f64, f64) = (0.01, 50.0);
/// Default truncation for location parameters.
pub const DEFAULT_LOCATION_BOX: (f64, f64) = (-50.0, 50.0);
/// Box-relative distance to an artificial face that triggers a warning.
pub const NEAR_BOUND_FRACTION: f64 = 0.05;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Support of the observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Support {
    /// Continuous interval with (possibly infinite) endpoints.
    Interval { lo: f64, hi: f64 },
    /// `{0, 1, 2, …}`, optionally capped at `max`.
    Lattice { max: Option<u64> },
}

impl Support {
    pub fn contains(&self, x: f64) -> bool {
        match *self {
            Support::Interval { lo, hi } => x >= lo && x <= hi,
            Support::Lattice { max } => {
                x >= 0.0 && x.fract() == 0.0 && max.is_none_or(|m| x <= m as f64)
            }
        }
    }

    pub fn is_lattice(&self) -> bool {
        matches!(self, Support::Lattice { .. })
    }
}

/// Axis-aligned parameter box.
///
/// Degenerate coordinates (`lower == upper`) are allowed and represent a
/// fixed parameter; a box with every coordinate degenerate is a point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Faces that are truncations of an unbounded space.
    #[serde(default)]
    pub artificial_lower: Vec<bool>,
    #[serde(default)]
    pub artificial_upper: Vec<bool>,
}

impl ParamBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let d = lower.len();
        Self::with_faces(lower, upper, vec![false; d], vec![false; d])
    }

    pub fn with_faces(
        lower: Vec<f64>,
        upper: Vec<f64>,
        artificial_lower: Vec<bool>,
        artificial_upper: Vec<bool>,
    ) -> Result<Self> {
        let b = ParamBox {
            lower,
            upper,
            artificial_lower,
            artificial_upper,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn point(p: &[f64]) -> Self {
        ParamBox {
            lower: p.to_vec(),
            upper: p.to_vec(),
            artificial_lower: vec![false; p.len()],
            artificial_upper: vec![false; p.len()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.lower.len();
        if d == 0 || self.upper.len() != d {
            return Err(Error::Dimension(format!(
                "box bounds have lengths {} and {}",
                d,
                self.upper.len()
            )));
        }
        if self.artificial_lower.len() != d || self.artificial_upper.len() != d {
            return Err(Error::Dimension("artificial-face flags do not match box dimension".into()));
        }
        for i in 0..d {
            let (lo, hi) = (self.lower[i], self.upper[i]);
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!(
                    "box coordinate {i} has invalid bounds [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn is_point(&self) -> bool {
        self.lower.iter().zip(&self.upper).all(|(a, b)| a == b)
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim()
            && p
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (lo, hi))| x >= lo && x <= hi)
    }

    /// Coordinate-wise projection onto the box.
    pub fn clip(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(x, (lo, hi))| x.clamp(*lo, *hi))
            .collect()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| {
                if *a > 0.0 {
                    (a * b).sqrt()
                } else {
                    0.5 * (a + b)
                }
            })
            .collect()
    }

    /// True when the coordinate is a positive scale and should be searched
    /// on a log axis.
    pub fn is_log_axis(&self, i: usize) -> bool {
        self.lower[i] > 0.0
    }

    /// Whether `p` lies within `frac` (box-relative) of an artificial face.
    pub fn near_artificial_face(&self, p: &[f64], frac: f64) -> bool {
        (0..self.dim()).any(|i| {
            let (lo, hi) = (self.lower[i], self.upper[i]);
            if lo == hi {
                return false;
            }
            let (x, lo_t, hi_t) = if self.is_log_axis(i) {
                (p[i].ln(), lo.ln(), hi.ln())
            } else {
                (p[i], lo, hi)
            };
            let w = hi_t - lo_t;
            (self.artificial_lower[i] && x - lo_t <= frac * w)
                || (self.artificial_upper[i] && hi_t - x <= frac * w)
        })
    }

    /// Faces (coordinate, is_upper) that `p` sits on, within `tol` relative.
    pub fn active_faces(&self, p: &[f64], tol: f64) -> Vec<(usize, bool)> {
        let mut out = Vec::new();
        for i in 0..self.dim() {
            let (lo, hi) = (self.lower[i], self.upper[i]);
            if lo == hi {
                continue;
            }
            let w = hi - lo;
            if p[i] - lo <= tol * w {
                out.push((i, false));
            } else if hi - p[i] <= tol * w {
                out.push((i, true));
            }
        }
        out
    }
}

/// A parametric family of densities (with respect to Lebesgue or counting
/// measure) on a one-dimensional support.
pub trait Family: Debug + Send + Sync {
    fn id(&self) -> &'static str;

    fn dim(&self) -> usize {
        1
    }

    fn support(&self) -> Support;

    /// Whether `x` is an observation the density is defined (and positive) at.
    fn in_support(&self, x: f64) -> bool {
        self.support().contains(x)
    }

    /// The default (truncated) parameter box.
    fn default_space(&self) -> ParamBox;

    /// Whether `p` lies in the natural parameter domain.
    fn valid_params(&self, p: &[f64]) -> bool;

    /// Log-density without argument checks.
    fn log_density(&self, p: &[f64], x: f64) -> f64;

    /// Gradient of the log-density in the parameters.
    fn score(&self, p: &[f64], x: f64) -> Vec<f64>;

    fn sample(&self, p: &[f64], rng: &mut dyn RngCore) -> f64;

    /// Unconstrained closed-form MLE, if one exists.
    fn closed_form_mle(&self, _data: &[f64]) -> Option<Vec<f64>> {
        None
    }

    fn mean(&self, p: &[f64]) -> f64;

    fn variance(&self, p: &[f64]) -> f64;
}

/// Lognormal with log-scale variance `θ` and log-location 0:
/// `g(x) = exp(-(log x)² / 2θ) / (x √(2πθ))`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LogNormal;

impl Family for LogNormal {
    fn id(&self) -> &'static str {
        "lognormal"
    }
    fn support(&self) -> Support {
        Support::Interval {
            lo: 0.0,
            hi: f64::INFINITY,
        }
    }
    fn in_support(&self, x: f64) -> bool {
        x > 0.0 && x.is_finite()
    }
    fn default_space(&self) -> ParamBox {
        scale_box()
    }
    fn valid_params(&self, p: &[f64]) -> bool {
        p.len() == 1 && p[0] > 0.0
    }
    fn log_density(&self, p: &[f64], x: f64) -> f64 {
        let lx = x.ln();
        -lx - 0.5 * (LN_2PI + p[0].ln()) - lx * lx / (2.0 * p[0])
    }
    fn score(&self, p: &[f64], x: f64) -> Vec<f64> {
        let lx = x.ln();
        vec![-0.5 / p[0] + lx * lx / (2.0 * p[0] * p[0])]
    }
    fn sample(&self, p: &[f64], rng: &mut dyn RngCore) -> f64 {
        rand_distr::LogNormal::new(0.0, p[0].sqrt())
            .expect("validated variance")
            .sample(rng)
    }
    fn closed_form_mle(&self, data: &[f64]) -> Option<Vec<f64>> {
        let m = data.iter().map(|x| x.ln().powi(2)).sum::<f64>() / data.len() as f64;
        Some(vec![m])
    }
    fn mean(&self, p: &[f64]) -> f64 {
        (0.5 * p[0]).exp()
    }
    fn variance(&self, p: &[f64]) -> f64 {
        (p[0].exp() - 1.0) * p[0].exp()
    }
}

/// Exponential with scale `γ`: `h(x) = e^{-x/γ} / γ`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Exponential;

impl Family for Exponential {
    fn id(&self) -> &'static str {
        "exponential"
    }
    fn support(&self) -> Support {
        Support::Interval {
            lo: 0.0,
            hi: f64::INFINITY,
        }
    }
    fn default_space(&self) -> ParamBox {
        scale_box()
    }
    fn valid_params(&self, p: &[f64]) -> bool {
        p.len() == 1 && p[0] > 0.0
    }
    fn log_density(&self, p: &[f64], x: f64) -> f64 {
        -p[0].ln() - x / p[0]
    }
    fn score(&self, p: &[f64], x: f64) -> Vec<f64> {
        vec![-1.0 / p[0] + x / (p[0] * p[0])]
    }
    fn sample(&self, p: &[f64], rng: &mut dyn RngCore) -> f64 {
        rand_distr::Exp::new(1.0 / p[0])
            .expect("validated scale")
            .sample(rng)
    }
    fn closed_form_mle(&self, data: &[f64]) -> Option<Vec<f64>> {
        Some(vec![data.iter().sum::<f64>() / data.len() as f64])
    }
    fn mean(&self, p: &[f64]) -> f64 {
        p[0]
    }
    fn variance(&self, p: &[f64]) -> f64 {
        p[0] * p[0]
    }
}

/// Poisson with mean `θ`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Poisson;

impl Family for Poisson {
    fn id(&self) -> &'static str {
        "poisson"
    }
    fn support(&self) -> Support {
        Support::Lattice { max: None }
    }
    fn default_space(&self) -> ParamBox {
        scale_box()
    }
    fn valid_params(&self, p: &[f64]) -> bool {
        p.len() == 1 && p[0] > 0.0
    }
    fn log_density(&self, p: &[f64], x: f64) -> f64 {
        -p[0] + x * p[0].ln() - ln_gamma(x + 1.0)
    }
    fn score(&self, p: &[f64], x: f64) -> Vec<f64> {
        vec![x / p[0] - 1.0]
    }
    fn sample(&self, p: &[f64], rng: &mut dyn RngCore) -> f64 {
        rand_distr::Poisson::new(p[0])
            .expect("validated mean")
            .sample(rng)
    }
    fn closed_form_mle(&self, data: &[f64]) -> Option<Vec<f64>> {
        Some(vec![data.iter().sum::<f64>() / data.len() as f64])
    }
    fn mean(&self, p: &[f64]) -> f64 {
        p[0]
    }
    fn variance(&self, p: &[f64]) -> f64 {
        p[0]
    }
}

/// Geometric on `{0, 1, …}` parameterized by the failure-to-success odds
/// `γ`: `h(x) = γ^x / (1+γ)^{x+1}`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Geometric;

impl Family for Geometric {
    fn id(&self) -> &'static str {
        "geometric"
    }
    fn support(&self) -> Support {
        Support::Lattice { max: None }
    }
    fn default_space(&self) -> ParamBox {
        scale_box()
    }
    fn valid_params(&self, p: &[f64]) -> bool {
        p.len() == 1 && p[0] > 0.0
    }
    fn log_density(&self, p: &[f64], x: f64) -> f64 {
        x * p[0].ln() - (x + 1.0) * p[0].ln_1p()
    }
    fn score(&self, p: &[f64], x: f64) -> Vec<f64> {
        vec![x / p[0] - (x + 1.0) / (1.0 + p[0])]
    }
    fn sample(&self, p: &[f64], rng: &mut dyn RngCore) -> f64 {
        rand_distr::Geometric::new(1.0 / (1.0 + p[0]))
            .expect("validated odds")
            .sample(rng) as f64
    }
    fn closed_form_mle(&self, data: &[f64]) -> Option<Vec<f64>> {
        Some(vec![data.iter().sum::<f64>() / data.len() as f64])
    }
    fn mean(&self, p: &[f64]) -> f64 {
        p[0]
    }
    fn variance(&self, p: &[f64]) -> f64 {
        p[0] * (1.0 + p[0])
    }
}

/// Unit-variance Gaussian location family `N(μ, 1)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct GaussianLocation;

impl Family for GaussianLocation {
    fn id(&self) -> &'static str {
        "gaussian"
    }
    fn support(&self) -> Support {
        Support::Interval {
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
        }
    }
    fn in_support(&self, x: f64) -> bool {
        x.is_finite()
    }
    fn default_space(&self) -> ParamBox {
        let (lo, hi) = DEFAULT_LOCATION_BOX;
        ParamBox::with_faces(vec![lo], vec![hi], vec![true], vec![true]).expect("static box")
    }
    fn valid_params(&self, p: &[f64]) -> bool {
        p.len() == 1 && p[0].is_finite()
    }
    fn log_density(&self, p: &[f64], x: f64) -> f64 {
        -0.5 * (LN_2PI + (x - p[0]).powi(2))
    }
    fn score(&self, p: &[f64], x: f64) -> Vec<f64> {
        vec![x - p[0]]
    }
    fn sample(&self, p: &[f64], rng: &mut dyn RngCore) -> f64 {
        let z: f64 = rand_distr::StandardNormal.sample(rng);
        p[0] + z
    }
    fn closed_form_mle(&self, data: &[f64]) -> Option<Vec<f64>> {
        Some(vec![data.iter().sum::<f64>() / data.len() as f64])
    }
    fn mean(&self, p: &[f64]) -> f64 {
        p[0]
    }
    fn variance(&self, _p: &[f64]) -> f64 {
        1.0
    }
}

/// Bernoulli with success probability `p`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bernoulli;

impl Family for Bernoulli {
    fn id(&self) -> &'static str {
        "bernoulli"
    }
    fn support(&self) -> Support {
        Support::Lattice { max: Some(1) }
    }
    fn default_space(&self) -> ParamBox {
        ParamBox::with_faces(vec![1e-3], vec![1.0 - 1e-3], vec![true], vec![true])
            .expect("static box")
    }
    fn valid_params(&self, p: &[f64]) -> bool {
        p.len() == 1 && p[0] > 0.0 && p[0] < 1.0
    }
    fn log_density(&self, p: &[f64], x: f64) -> f64 {
        if x == 1.0 {
            p[0].ln()
        } else if x == 0.0 {
            (-p[0]).ln_1p()
        } else {
            f64::NEG_INFINITY
        }
    }
    fn score(&self, p: &[f64], x: f64) -> Vec<f64> {
        vec![x / p[0] - (1.0 - x) / (1.0 - p[0])]
    }
    fn sample(&self, p: &[f64], rng: &mut dyn RngCore) -> f64 {
        let u: f64 = rand_distr::StandardUniform.sample(rng);
        if u < p[0] {
            1.0
        } else {
            0.0
        }
    }
    fn closed_form_mle(&self, data: &[f64]) -> Option<Vec<f64>> {
        Some(vec![data.iter().sum::<f64>() / data.len() as f64])
    }
    fn mean(&self, p: &[f64]) -> f64 {
        p[0]
    }
    fn variance(&self, p: &[f64]) -> f64 {
        p[0] * (1.0 - p[0])
    }
}

fn scale_box() -> ParamBox {
    let (lo, hi) = DEFAULT_SCALE_BOX;
    ParamBox::with_faces(vec![lo], vec![hi], vec![true], vec![true]).expect("static box")
}

/// Ids accepted by [`builtin`].
pub const BUILTIN_IDS: [&str; 6] = [
    "lognormal",
    "exponential",
    "poisson",
    "geometric",
    "gaussian",
    "bernoulli",
];

/// Looks up a built-in family by id.
pub fn builtin(id: &str) -> Result<Arc<dyn Family>> {
    Ok(match id {
        "lognormal" => Arc::new(LogNormal),
        "exponential" => Arc::new(Exponential),
        "poisson" => Arc::new(Poisson),
        "geometric" => Arc::new(Geometric),
        "gaussian" => Arc::new(GaussianLocation),
        "bernoulli" => Arc::new(Bernoulli),
        "gaussian-linear" => {
            return Err(Error::Config(
                "`gaussian-linear` is a joint regression model; use the glm commands".into(),
            ))
        }
        other => return Err(Error::Config(format!("unknown family `{other}`"))),
    })
}

/// A family restricted to a parameter box.
#[derive(Debug, Clone)]
pub struct FamilyModel {
    pub family: Arc<dyn Family>,
    pub space: ParamBox,
}

impl FamilyModel {
    pub fn new(family: Arc<dyn Family>, space: ParamBox) -> Result<Self> {
        space.validate()?;
        if space.dim() != family.dim() {
            return Err(Error::Dimension(format!(
                "`{}` has {} parameters but the box has {}",
                family.id(),
                family.dim(),
                space.dim()
            )));
        }
        for corner in [&space.lower, &space.upper] {
            if !family.valid_params(corner) {
                return Err(Error::param(
                    family.id(),
                    format!("box corner {corner:?} outside the natural parameter domain"),
                ));
            }
        }
        Ok(Self { family, space })
    }

    /// Built-in family on its default truncated box.
    pub fn builtin(id: &str) -> Result<Self> {
        let family = builtin(id)?;
        let space = family.default_space();
        Self::new(family, space)
    }

    pub fn with_space(&self, space: ParamBox) -> Result<Self> {
        Self::new(self.family.clone(), space)
    }

    pub fn id(&self) -> &'static str {
        self.family.id()
    }

    pub fn support(&self) -> Support {
        self.family.support()
    }

    pub fn check_params(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.space.dim() {
            return Err(Error::Dimension(format!(
                "`{}` expects {} parameters, got {}",
                self.id(),
                self.space.dim(),
                p.len()
            )));
        }
        if !self.space.contains(p) {
            return Err(Error::param(
                self.id(),
                format!(
                    "{p:?} outside box [{:?}, {:?}]",
                    self.space.lower, self.space.upper
                ),
            ));
        }
        Ok(())
    }

    /// Checked log-density.
    pub fn log_density(&self, p: &[f64], x: f64) -> Result<f64> {
        self.check_params(p)?;
        if !self.family.in_support(x) {
            return Err(Error::Domain {
                family: self.id().to_string(),
                x,
            });
        }
        Ok(self.family.log_density(p, x))
    }

    pub fn log_likelihood(&self, p: &[f64], data: &[f64]) -> f64 {
        data.iter().map(|&x| self.family.log_density(p, x)).sum()
    }

    /// Draws `count` observations with a generator seeded from `seed`.
    pub fn sample(&self, p: &[f64], count: usize, seed: u64) -> Result<Vec<f64>> {
        self.check_params(p)?;
        let mut rng = crate::rng::stream(seed, 0);
        Ok((0..count).map(|_| self.family.sample(p, &mut rng)).collect())
    }

    /// Maximum likelihood estimate restricted to the box.
    ///
    /// Closed forms are projected onto the box coordinate-wise; families
    /// without one are maximized numerically with a multistart simplex.
    pub fn mle(&self, data: &[f64]) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::Config("mle requires at least one observation".into()));
        }
        if let Some(&x) = data.iter().find(|&&x| !self.family.in_support(x)) {
            return Err(Error::Domain {
                family: self.id().to_string(),
                x,
            });
        }
        if let Some(p) = self.family.closed_form_mle(data) {
            return Ok(self.space.clip(&p));
        }
        self.numerical_mle(data)
    }

    pub(crate) fn numerical_mle(&self, data: &[f64]) -> Result<Vec<f64>> {
        let space = &self.space;
        let axes = crate::optim::SearchSpace::from_box(space);
        let starts = axes.grid_points(7);
        let objective = |u: &[f64]| -> f64 {
            let p = axes.to_param(u);
            let ll = self.log_likelihood(&p, data);
            if ll.is_finite() {
                -ll
            } else {
                f64::INFINITY
            }
        };
        let mut scored: Vec<(Vec<f64>, f64)> = starts
            .into_iter()
            .map(|u| {
                let f = objective(&u);
                (u, f)
            })
            .collect();
        scored.sort_by(|a, b| a.1.total_cmp(&b.1));
        let mut best: Option<(Vec<f64>, f64)> = None;
        let mut any_converged = false;
        for (u0, _) in scored.iter().take(3) {
            let r = nelder_mead(&objective, u0, &axes, &NelderMeadOptions::default());
            any_converged |= r.converged;
            if best.as_ref().is_none_or(|b| r.fx < b.1) {
                best = Some((r.x, r.fx));
            }
        }
        let (u, f) = best.expect("at least one start");
        if !any_converged || !f.is_finite() {
            return Err(Error::Optimization {
                reason: format!("numerical MLE for `{}` did not converge", self.id()),
                incumbent: Some((axes.to_param(&u), -f)),
            });
        }
        Ok(space.clip(&axes.to_param(&u)))
    }
}

/// Outcome of [`check_separation`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparationReport {
    /// Minimum over the boxes of `E_{g_θ}[log g_θ − log h_γ]`.
    pub min_kl: f64,
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub threshold: f64,
    pub separated: bool,
}

/// Default threshold on the minimum KL divergence for two families to count
/// as separated.
pub const SEPARATION_THRESHOLD: f64 = 1e-4;

/// `E_{g_θ}[log g_θ(X) − log h_γ(X)]` by quadrature.
pub fn kl_divergence(g: &dyn Family, theta: &[f64], h: &dyn Family, gamma: &[f64]) -> Result<f64> {
    let r = quad::integrate(
        &g.support(),
        |x| {
            if g.in_support(x) {
                g.log_density(theta, x)
            } else {
                f64::NEG_INFINITY
            }
        },
        |x| [1.0, g.log_density(theta, x) - h.log_density(gamma, x)],
        1e-10,
    )?;
    Ok(r.ratio(1))
}

/// Numerically minimizes the KL divergence of `h_γ` from `g_θ` over both
/// boxes (grid scan followed by simplex refinement) and reports whether the
/// families are separated.
pub fn check_separation(gfam: &FamilyModel, hfam: &FamilyModel, resolution: usize) -> Result<SeparationReport> {
    if gfam.support() != hfam.support() {
        return Err(Error::Config(format!(
            "`{}` and `{}` have different supports",
            gfam.id(),
            hfam.id()
        )));
    }
    let joint = crate::optim::SearchSpace::joint(&gfam.space, &hfam.space);
    let dg = gfam.space.dim();
    let objective = |u: &[f64]| -> f64 {
        let p = joint.to_param(u);
        kl_divergence(gfam.family.as_ref(), &p[..dg], hfam.family.as_ref(), &p[dg..])
            .unwrap_or(f64::INFINITY)
    };
    let mut cells: Vec<(Vec<f64>, f64)> = joint
        .grid_points(resolution.max(2))
        .into_iter()
        .map(|u| {
            let f = objective(&u);
            (u, f)
        })
        .collect();
    if cells.iter().all(|c| !c.1.is_finite()) {
        return Err(Error::Numeric("KL divergence not finite anywhere on the grid".into()));
    }
    cells.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| crate::optim::lex_cmp(&a.0, &b.0)));
    let mut best = cells[0].clone();
    for (u0, _) in cells.iter().take(3) {
        let r = nelder_mead(&objective, u0, &joint, &NelderMeadOptions::default());
        if r.fx < best.1 {
            best = (r.x, r.fx);
        }
    }
    let p = joint.to_param(&best.0);
    let min_kl = best.1.max(0.0);
    Ok(SeparationReport {
        min_kl,
        theta: p[..dg].to_vec(),
        gamma: p[dg..].to_vec(),
        threshold: SEPARATION_THRESHOLD,
        separated: min_kl > SEPARATION_THRESHOLD,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn log_density_reference_values() {
        let e = FamilyModel::builtin("exponential").unwrap();
        assert_eq!(e.log_density(&[1.0], 0.0).unwrap(), 0.0);
        let ln = FamilyModel::builtin("lognormal").unwrap();
        assert!((ln.log_density(&[1.0], 1.0).unwrap() + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        let po = FamilyModel::builtin("poisson").unwrap();
        let direct = (-2.0f64).exp() * 8.0 / 6.0;
        assert!((po.log_density(&[2.0], 3.0).unwrap() - direct.ln()).abs() < 1e-13);
        assert!(
            (po.log_density(&[2.0], 3.0).unwrap() - (-2.0 + 3.0 * 2f64.ln() - 6f64.ln())).abs()
                < 1e-13
        );
    }

    #[test]
    fn log_density_rejects_bad_inputs() {
        let po = FamilyModel::builtin("poisson").unwrap();
        assert!(matches!(po.log_density(&[2.0], 1.5), Err(Error::Domain { .. })));
        assert!(matches!(po.log_density(&[2.0], -1.0), Err(Error::Domain { .. })));
        assert!(matches!(po.log_density(&[100.0], 1.0), Err(Error::Parameter { .. })));
        let ln = FamilyModel::builtin("lognormal").unwrap();
        assert!(matches!(ln.log_density(&[1.0], 0.0), Err(Error::Domain { .. })));
    }

    #[test]
    fn mle_examples() {
        let e = FamilyModel::builtin("exponential").unwrap();
        let data = [0.5, 1.5, 2.5, 3.5];
        assert!((e.mle(&data).unwrap()[0] - 2.0).abs() < 1e-15);

        let ln = FamilyModel::builtin("lognormal").unwrap();
        assert_eq!(ln.mle(&[1.0, 1.0, 1.0]).unwrap(), vec![DEFAULT_SCALE_BOX.0]);

        let space = ParamBox::with_faces(vec![1.0], vec![50.0], vec![false], vec![true]).unwrap();
        let po = FamilyModel::builtin("poisson").unwrap().with_space(space).unwrap();
        let data = [0.0, 1.0, 0.0, 1.0, 0.0];
        assert_eq!(po.mle(&data).unwrap(), vec![1.0]);
    }

    #[test]
    fn numerical_mle_matches_closed_form() {
        #[derive(Debug)]
        struct NoClosedForm;
        impl Family for NoClosedForm {
            fn id(&self) -> &'static str {
                "exponential-numeric"
            }
            fn support(&self) -> Support {
                Exponential.support()
            }
            fn default_space(&self) -> ParamBox {
                Exponential.default_space()
            }
            fn valid_params(&self, p: &[f64]) -> bool {
                Exponential.valid_params(p)
            }
            fn log_density(&self, p: &[f64], x: f64) -> f64 {
                Exponential.log_density(p, x)
            }
            fn score(&self, p: &[f64], x: f64) -> Vec<f64> {
                Exponential.score(p, x)
            }
            fn sample(&self, p: &[f64], rng: &mut dyn RngCore) -> f64 {
                Exponential.sample(p, rng)
            }
            fn mean(&self, p: &[f64]) -> f64 {
                p[0]
            }
            fn variance(&self, p: &[f64]) -> f64 {
                p[0] * p[0]
            }
        }
        let m = FamilyModel::new(Arc::new(NoClosedForm), Exponential.default_space()).unwrap();
        let data = [0.3, 2.2, 1.7, 0.9, 4.1];
        let p = m.mle(&data).unwrap();
        assert!((p[0] - 1.84).abs() < 1e-5, "{p:?}");
    }

    #[test]
    fn separation_self_is_not_separated() {
        let e = FamilyModel::builtin("exponential").unwrap();
        let r = check_separation(&e, &e, 9).unwrap();
        assert!(r.min_kl < 1e-8);
        assert!(!r.separated);
    }

    #[test]
    fn box_helpers() {
        let b = ParamBox::with_faces(vec![0.01], vec![50.0], vec![true], vec![true]).unwrap();
        assert!(b.near_artificial_face(&[0.011], NEAR_BOUND_FRACTION));
        assert!(b.near_artificial_face(&[49.0], NEAR_BOUND_FRACTION));
        assert!(!b.near_artificial_face(&[1.3], NEAR_BOUND_FRACTION));
        assert!(ParamBox::new(vec![2.0], vec![1.0]).is_err());
        assert!(ParamBox::new(vec![1.0, 0.0], vec![2.0]).is_err());
        assert_eq!(b.clip(&[100.0]), vec![50.0]);
    }
}
