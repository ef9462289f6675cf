//! Error exponents when the two families need not be separated.
//!
//! For a sampling law `g_{θ₀}` and drift `b`, the exponent of
//! `P(LR_n > e^{nb})` is `ρ† = −log M†` with
//! `M† = inf_θ sup_γ inf_{λ≥0} E_{θ₀} exp{λ(log h_γ − log g_θ − b)}`.
//! The saddle `(θ†, γ†, λ†)` defines the tilted law
//! `Q† ∝ g_{θ₀} (h_{γ†}/g_{θ†})^{λ†} e^{−λ† b}` used for importance sampling.
//!
//! The inner infimum runs over `λ ≥ 0`: the event `{Σ l_i > 0}` is only
//! controlled by nonnegative exponents, and when `E_{θ₀} l ≥ 0` the event is
//! not rare, so the inner value is 0.

use log::warn;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::chernoff::{bracket_derivative, ChernoffResult};
use crate::error::{Error, Result, Tail};
use crate::families::{kl_divergence, FamilyModel, ParamBox, SEPARATION_THRESHOLD};
use crate::mgf::{self, LogMgfSpec};
use crate::optim::{brent_root, lex_cmp, local_minimize, NelderMeadOptions, SearchSpace};
use crate::quad;
use crate::rng;
use crate::sampler::DensitySampler;

/// Tolerance on the λ root of `Λ'(λ) = 0`.
pub const LAMBDA_TOL: f64 = 1e-12;
/// Tolerance of the Euler checks at interior saddle coordinates.
pub const EULER_TOL: f64 = 1e-4;
/// Relative distance to a face below which a coordinate counts as on it.
const FACE_TOL: f64 = 1e-6;

/// The saddle of the inf-sup-inf program together with the families it
/// refers to.
#[derive(Debug, Clone)]
pub struct TiltedMeasure {
    pub gfam: FamilyModel,
    pub hfam: FamilyModel,
    /// Sampling parameters `θ₀` (a point of the g-family).
    pub base_params: Vec<f64>,
    pub offset_b: f64,
    pub theta_dag: Vec<f64>,
    pub gamma_dag: Vec<f64>,
    pub lambda_dag: f64,
    pub log_m_dag: f64,
    /// Another incumbent reached the same value at parameters more than
    /// 1e-3 away.
    pub multiple_optima: bool,
}

#[derive(Serialize)]
struct TiltRecord<'a> {
    theta0: &'a [f64],
    b: f64,
    theta_dag: &'a [f64],
    gamma_dag: &'a [f64],
    lambda_dag: f64,
    #[serde(rename = "log_M_dag")]
    log_m_dag: f64,
    rate: f64,
    multiple_optima: bool,
}

impl Serialize for TiltedMeasure {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TiltRecord {
            theta0: &self.base_params,
            b: self.offset_b,
            theta_dag: &self.theta_dag,
            gamma_dag: &self.gamma_dag,
            lambda_dag: self.lambda_dag,
            log_m_dag: self.log_m_dag,
            rate: rate_nonsep(self),
            multiple_optima: self.multiple_optima,
        }
        .serialize(s)
    }
}

impl TiltedMeasure {
    /// Tilt at a given `(θ, γ, λ)`; `log M` is evaluated by quadrature.
    pub fn at(
        gfam: &FamilyModel,
        hfam: &FamilyModel,
        base_params: &[f64],
        theta: &[f64],
        gamma: &[f64],
        lambda: f64,
        offset_b: f64,
    ) -> Result<Self> {
        let spec = LogMgfSpec::new(gfam, hfam, base_params, theta, gamma, offset_b)?;
        Ok(Self {
            gfam: gfam.clone(),
            hfam: hfam.clone(),
            base_params: base_params.to_vec(),
            offset_b,
            theta_dag: theta.to_vec(),
            gamma_dag: gamma.to_vec(),
            lambda_dag: lambda,
            log_m_dag: mgf::log_mgf(&spec, lambda)?,
            multiple_optima: false,
        })
    }

    /// Type-I tilt of a (generalized) Chernoff saddle: sample from `g_{θ*}`
    /// tilted towards `h_{γ*}` with `λ = z*`.
    pub fn type_one(gfam: &FamilyModel, hfam: &FamilyModel, saddle: &ChernoffResult) -> Result<Self> {
        Self::at(
            gfam,
            hfam,
            &saddle.theta_star,
            &saddle.theta_star,
            &saddle.gamma_star,
            saddle.z_star,
            0.0,
        )
    }

    /// Type-II tilt of a Chernoff saddle, with the roles of the families
    /// exchanged: sample from `h_{γ*}` tilted towards `g_{θ*}` with
    /// `λ = 1 − z*`. The tilted law is the same as for [`type_one`](Self::type_one).
    pub fn type_two(gfam: &FamilyModel, hfam: &FamilyModel, saddle: &ChernoffResult) -> Result<Self> {
        Self::at(
            hfam,
            gfam,
            &saddle.gamma_star,
            &saddle.gamma_star,
            &saddle.theta_star,
            1.0 - saddle.z_star,
            0.0,
        )
    }

    pub fn spec(&self) -> LogMgfSpec {
        LogMgfSpec::unchecked(
            &self.gfam,
            &self.hfam,
            &self.base_params,
            &self.theta_dag,
            &self.gamma_dag,
            self.offset_b,
        )
    }

    /// Log-density of `Q†` at `x` (normalized).
    pub fn log_density(&self, x: f64) -> f64 {
        self.spec().log_tilted(self.lambda_dag, x) - self.log_m_dag
    }

    /// Per-observation `log(dP_{g_{θ₀}}/dQ†)(x) = log M† − λ† l(x)`.
    pub fn log_weight(&self, x: f64) -> f64 {
        self.log_m_dag - self.lambda_dag * self.spec().log_ratio(x)
    }
}

/// `ρ† = −log M†`.
pub fn rate_nonsep(tilt: &TiltedMeasure) -> f64 {
    -tilt.log_m_dag
}

/// Outcome of [`feasibility_b`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Feasibility {
    /// `sup_γ E_{θ₀}[log h_γ − log g_{θ₀}]`.
    pub sup_log_ratio: f64,
    pub gamma_at_sup: Vec<f64>,
    pub b: f64,
    /// `b` exceeds the supremum.
    pub feasible: bool,
    /// `inf_γ KL(g_{θ₀} ‖ h_γ)`, equal to `−sup_log_ratio`.
    pub min_kl: f64,
    /// The KL infimum exceeds the separation threshold.
    pub kl_positive: bool,
}

/// Checks that the drift `b` exceeds `sup_γ E_{θ₀}[log h_γ − log g_{θ₀}]`
/// and that the KL divergence from `g_{θ₀}` to the h-family stays positive.
pub fn feasibility_b(
    gfam: &FamilyModel,
    theta0: &[f64],
    hfam: &FamilyModel,
    gamma_box: &ParamBox,
    b: f64,
) -> Result<Feasibility> {
    gfam.check_params(theta0)?;
    let hfam = hfam.with_space(gamma_box.clone())?;
    let space = SearchSpace::from_box(gamma_box);
    let kl = |u: &[f64]| -> f64 {
        let gamma = space.to_param(u);
        kl_divergence(gfam.family.as_ref(), theta0, hfam.family.as_ref(), &gamma).unwrap_or(f64::INFINITY)
    };
    let mut cells: Vec<(Vec<f64>, f64)> = space
        .grid_points(21)
        .into_par_iter()
        .map(|u| {
            let v = kl(&u);
            (u, v)
        })
        .collect();
    cells.retain(|c| c.1.is_finite());
    if cells.is_empty() {
        return Err(Error::Numeric("KL divergence not finite anywhere on the γ grid".into()));
    }
    cells.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| lex_cmp(&a.0, &b.0)));
    let radius = grid_step(&space, 21);
    let opts = NelderMeadOptions::default();
    let mut best = cells[0].clone();
    for (u0, _) in cells.iter().take(3) {
        let r = local_minimize(&kl, u0, &space, radius, &opts);
        if r.fx < best.1 {
            best = (r.x, r.fx);
        }
    }
    let min_kl = best.1.max(0.0);
    let sup = -min_kl;
    Ok(Feasibility {
        sup_log_ratio: sup,
        gamma_at_sup: space.to_param(&best.0),
        b,
        feasible: b > sup,
        min_kl,
        kl_positive: min_kl > SEPARATION_THRESHOLD,
    })
}

/// Settings for [`solve_tilt`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TiltConfig {
    pub theta_grid: usize,
    pub gamma_grid: usize,
    /// Local refinements of the outer (θ) problem, started from the best cells.
    pub theta_starts: usize,
    /// Extra starts around the best γ cell for the middle problem.
    pub gamma_perturbations: usize,
    pub max_iter: usize,
    pub xtol: f64,
}

impl Default for TiltConfig {
    fn default() -> Self {
        Self {
            theta_grid: 21,
            gamma_grid: 21,
            theta_starts: 3,
            gamma_perturbations: 4,
            max_iter: 400,
            xtol: 1e-9,
        }
    }
}

impl TiltConfig {
    fn nelder_mead(&self) -> NelderMeadOptions {
        NelderMeadOptions {
            max_iter: self.max_iter,
            xtol: self.xtol,
            ..Default::default()
        }
    }
}

/// `inf_{λ≥0} Λ(λ)` with its minimizer. Zero at `λ = 0` when `Λ'(0) ≥ 0`.
pub fn inner_inf(spec: &LogMgfSpec) -> Result<(f64, f64)> {
    let d0 = mgf::evaluate(spec, 0.0)?.d1;
    if d0 >= 0.0 {
        return Ok((0.0, 0.0));
    }
    let Some((a, fa, b, fb)) = bracket_derivative(spec, 0.0, 1.0, d0)? else {
        return Err(Error::Divergence {
            tail: Tail::Upper,
            context: "one-sided drift: the λ-derivative of the log-MGF stays negative on its \
                      finiteness domain, so inf over λ has no stationary point"
                .into(),
        });
    };
    let lambda = brent_root(|z| Ok(mgf::evaluate(spec, z)?.d1), a, b, fa, fb, LAMBDA_TOL, 200)?;
    Ok((mgf::log_mgf(spec, lambda)?, lambda))
}

fn grid_step(space: &SearchSpace, resolution: usize) -> f64 {
    space
        .axes
        .iter()
        .filter(|a| !a.is_fixed())
        .map(|a| (a.hi - a.lo) / (resolution.max(2) - 1) as f64)
        .fold(0.0, f64::max)
}

struct Problem<'a> {
    gfam: &'a FamilyModel,
    hfam: &'a FamilyModel,
    theta0: &'a [f64],
    b: f64,
    gspace: SearchSpace,
    config: &'a TiltConfig,
}

/// Result of the middle problem at one θ.
struct Middle {
    value: f64,
    gamma_u: Vec<f64>,
    lambda: f64,
}

impl Problem<'_> {
    fn inner(&self, theta: &[f64], gamma: &[f64]) -> Result<(f64, f64)> {
        inner_inf(&LogMgfSpec::unchecked(self.gfam, self.hfam, self.theta0, theta, gamma, self.b))
    }

    /// `sup_γ inf_λ Λ` at `θ`; γ values where the inner problem fails count
    /// as `−∞`.
    fn middle(&self, theta: &[f64]) -> Middle {
        let objective = |u: &[f64]| -> f64 {
            match self.inner(theta, &self.gspace.to_param(u)) {
                Ok((v, _)) => -v,
                Err(_) => f64::INFINITY,
            }
        };
        let mut cells: Vec<(Vec<f64>, f64)> = self
            .gspace
            .grid_points(self.config.gamma_grid)
            .into_iter()
            .map(|u| {
                let v = objective(&u);
                (u, v)
            })
            .collect();
        cells.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| lex_cmp(&a.0, &b.0)));
        let step = grid_step(&self.gspace, self.config.gamma_grid);
        let best_cell = cells[0].0.clone();
        let mut starts = vec![best_cell.clone()];
        let free: Vec<usize> = (0..self.gspace.dim()).filter(|&i| !self.gspace.axes[i].is_fixed()).collect();
        for k in 0..self.config.gamma_perturbations {
            if free.is_empty() {
                break;
            }
            let mut u = best_cell.clone();
            let axis = free[(k / 2) % free.len()];
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            u[axis] += sign * 0.5 * step;
            self.gspace.clip(&mut u);
            starts.push(u);
        }
        let opts = self.config.nelder_mead();
        let mut best = cells[0].clone();
        for u0 in &starts {
            let r = local_minimize(&objective, u0, &self.gspace, step, &opts);
            if r.fx < best.1 || (r.fx == best.1 && lex_cmp(&r.x, &best.0).is_lt()) {
                best = (r.x, r.fx);
            }
        }
        let lambda = self
            .inner(theta, &self.gspace.to_param(&best.0))
            .map_or(f64::NAN, |r| r.1);
        Middle {
            value: -best.1,
            gamma_u: best.0,
            lambda,
        }
    }
}

/// Solves `inf_θ sup_γ inf_{λ≥0} Λ` on the boxes and returns the saddle.
pub fn solve_tilt(
    gfam: &FamilyModel,
    hfam: &FamilyModel,
    theta_box: &ParamBox,
    gamma_box: &ParamBox,
    theta0: &[f64],
    b: f64,
    config: &TiltConfig,
) -> Result<TiltedMeasure> {
    let gfam_boxed = gfam.with_space(theta_box.clone())?;
    let hfam_boxed = hfam.with_space(gamma_box.clone())?;
    // θ₀ need not lie in the θ box; it only has to be a valid parameter
    gfam.check_params(theta0)?;
    if gfam.support() != hfam.support() {
        return Err(Error::Config(format!(
            "`{}` and `{}` have different supports",
            gfam.id(),
            hfam.id()
        )));
    }
    let feas = feasibility_b(gfam, theta0, hfam, gamma_box, b)?;
    if !feas.feasible {
        return Err(Error::Config(format!(
            "drift b = {b} does not exceed sup_γ E[log h_γ − log g_θ₀] = {:.6} (attained near γ = {:?}); \
             the event is not rare",
            feas.sup_log_ratio, feas.gamma_at_sup
        )));
    }
    let problem = Problem {
        gfam: &gfam_boxed,
        hfam: &hfam_boxed,
        theta0,
        b,
        gspace: SearchSpace::from_box(gamma_box),
        config,
    };
    let tspace = SearchSpace::from_box(theta_box);
    let outer = |u: &[f64]| -> f64 { problem.middle(&tspace.to_param(u)).value };

    let mut cells: Vec<(Vec<f64>, f64)> = tspace
        .grid_points(config.theta_grid)
        .into_par_iter()
        .map(|u| {
            let v = outer(&u);
            (u, v)
        })
        .collect();
    cells.retain(|c| !c.1.is_nan());
    if cells.is_empty() {
        return Err(Error::Numeric("inner problem failed on every θ grid cell".into()));
    }
    cells.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| lex_cmp(&a.0, &b.0)));
    let step = grid_step(&tspace, config.theta_grid);
    let opts = config.nelder_mead();
    let runs: Vec<_> = cells
        .iter()
        .take(config.theta_starts.max(1))
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(u0, _)| local_minimize(&outer, u0, &tspace, step, &opts))
        .collect();
    let mut incumbents: Vec<(Vec<f64>, f64)> = runs
        .iter()
        .filter(|r| r.fx.is_finite())
        .map(|r| (tspace.to_param(&r.x), r.fx))
        .collect();
    if incumbents.is_empty() {
        let p = tspace.to_param(&cells[0].0);
        return Err(Error::Optimization {
            reason: "outer θ refinement produced no finite value".into(),
            incumbent: Some((p, cells[0].1)),
        });
    }
    incumbents.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| lex_cmp(&a.0, &b.0)));
    let (theta, value) = incumbents[0].clone();
    let multiple_optima = incumbents.iter().skip(1).any(|(p, v)| {
        (v - value).abs() <= 1e-8 * (1.0 + value.abs())
            && p.iter().zip(&theta).any(|(a, b)| (a - b).abs() > 1e-3)
    });
    if multiple_optima {
        warn!("the θ problem has several optima with log M† ≈ {value:.6}; reporting the lexicographically smallest");
    }
    let mid = problem.middle(&theta);
    let gamma = problem.gspace.to_param(&mid.gamma_u);
    if !mid.value.is_finite() || !mid.lambda.is_finite() {
        return Err(Error::Divergence {
            tail: Tail::Upper,
            context: format!("no stationary λ at the saddle θ = {theta:?}"),
        });
    }
    if mid.lambda <= 0.0 {
        warn!("λ† = 0 at the saddle: the event is not rare under g_θ₀");
    }
    Ok(TiltedMeasure {
        gfam: gfam_boxed.clone(),
        hfam: hfam_boxed.clone(),
        base_params: theta0.to_vec(),
        offset_b: b,
        theta_dag: theta,
        gamma_dag: gamma,
        lambda_dag: mid.lambda,
        log_m_dag: mid.value.min(0.0),
        multiple_optima,
    })
}

/// Position of one saddle coordinate relative to its box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Interior,
    LowerFace,
    UpperFace,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EulerCondition {
    /// "theta" or "gamma".
    pub block: &'static str,
    pub index: usize,
    pub placement: Placement,
    /// Expected score under `Q†`.
    pub expected_score: f64,
    /// Expected score along the inward direction (equal to the expected
    /// score at a lower face, its negative at an upper face).
    pub inward: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EulerReport {
    pub conditions: Vec<EulerCondition>,
    pub tol: f64,
    pub passed: bool,
}

/// Expected scores of `g_{θ†}` and `h_{γ†}` under `Q†`, checked against the
/// first-order conditions: zero at interior coordinates, nonpositive along
/// inward directions at faces.
pub fn euler_check(tilt: &TiltedMeasure, theta_box: &ParamBox, gamma_box: &ParamBox) -> Result<EulerReport> {
    let spec = tilt.spec();
    let lambda = tilt.lambda_dag;
    let support = spec.support();
    let mut conditions = Vec::new();
    let blocks: [(&'static str, &ParamBox, &[f64], bool); 2] = [
        ("theta", theta_box, &tilt.theta_dag, true),
        ("gamma", gamma_box, &tilt.gamma_dag, false),
    ];
    for (block, bx, params, is_g) in blocks {
        for i in 0..params.len() {
            let r = quad::integrate(
                &support,
                |x| spec.log_tilted(lambda, x),
                |x| {
                    let s = if is_g {
                        spec.gfam.score(params, x)
                    } else {
                        spec.hfam.score(params, x)
                    };
                    [1.0, s[i]]
                },
                mgf::QUAD_TOL,
            )?;
            let e = r.ratio(1);
            let placement = if bx.lower[i] == bx.upper[i] {
                Placement::Fixed
            } else if bx.active_faces(params, FACE_TOL).contains(&(i, false)) {
                Placement::LowerFace
            } else if bx.active_faces(params, FACE_TOL).contains(&(i, true)) {
                Placement::UpperFace
            } else {
                Placement::Interior
            };
            let (inward, passed) = match placement {
                Placement::Fixed => (0.0, true),
                Placement::Interior => (e, e.abs() <= EULER_TOL),
                Placement::LowerFace => (e, e <= EULER_TOL),
                Placement::UpperFace => (-e, -e <= EULER_TOL),
            };
            conditions.push(EulerCondition {
                block,
                index: i,
                placement,
                expected_score: e,
                inward,
                passed,
            });
        }
    }
    let passed = conditions.iter().all(|c| c.passed);
    Ok(EulerReport {
        conditions,
        tol: EULER_TOL,
        passed,
    })
}

/// Draws from `Q†`.
#[derive(Debug, Clone)]
pub struct TiltSampler {
    inner: DensitySampler,
}

impl TiltSampler {
    pub fn new(tilt: &TiltedMeasure) -> Result<Self> {
        let spec = tilt.spec();
        // Unit-variance Gaussian locations tilt to another unit-variance Gaussian.
        if spec.gfam.id() == "gaussian" && spec.hfam.id() == "gaussian" {
            let (t0, t, g) = (tilt.base_params[0], tilt.theta_dag[0], tilt.gamma_dag[0]);
            return Ok(Self {
                inner: DensitySampler::Normal {
                    mean: t0 + tilt.lambda_dag * (g - t),
                    sd: 1.0,
                },
            });
        }
        let lambda = tilt.lambda_dag;
        let inner = DensitySampler::tabulate(&spec.support(), |x| spec.log_tilted(lambda, x))?;
        Ok(Self { inner })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.inner.sample(rng)
    }
}

/// `count` draws from `Q†` using the stream `(seed, 0)`.
pub fn tilted_sampler(tilt: &TiltedMeasure, count: usize, seed: u64) -> Result<Vec<f64>> {
    let s = TiltSampler::new(tilt)?;
    let mut rng = rng::stream(seed, 0);
    Ok((0..count).map(|_| s.sample(&mut rng)).collect())
}
