//! Monte Carlo for GLRT error probabilities: direct simulation under the
//! truth and importance sampling under the tilted measures.
//!
//! Replication `r` at sample size `n` draws from the stream
//! `(seed, (n << 40) | r)`, and replications are reduced in fixed-size
//! chunks in index order, so estimates do not depend on the thread count.

use std::io::Write;
use std::ops::Range;

use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chernoff::ChernoffResult;
use crate::error::{Error, Result};
use crate::families::FamilyModel;
use crate::glm::{glm_fit, GaussianJoint, GlmDesign, JointRate};
use crate::mgf::LogMgfSpec;
use crate::nonsep::{TiltSampler, TiltedMeasure};
use crate::output::number;
use crate::rng;

/// Replications evaluated per parallel batch before reduction.
const CHUNK: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Direct,
    Tilted,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::Tilted => "tilted",
        }
    }
}

/// Which error probability is being estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    /// Truth in the null family; the event is `log LR_n > n b`.
    #[serde(rename = "type-I")]
    TypeI,
    /// Truth in the alternative family; the event is `log LR_n ≤ n b`.
    #[serde(rename = "type-II")]
    TypeII,
}

/// Outcome of one replication: whether the event occurred and
/// `log(dP/dQ)` of the whole sample (0 for direct sampling).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Replicate {
    pub event: bool,
    pub log_weight: f64,
}

/// A test together with a truth and, optionally, a proposal law.
pub trait Scenario: Sync {
    fn side(&self) -> Side;
    fn replicate(&self, n: usize, method: Method, rng: &mut ChaCha8Rng) -> Result<Replicate>;
}

/// `log LR_n = sup_γ Σ log h_γ(X_i) − sup_θ Σ log g_θ(X_i)`, with the
/// suprema over each model's box.
pub fn glrt_statistic(data: &[f64], gfam: &FamilyModel, hfam: &FamilyModel) -> Result<f64> {
    let theta = gfam.mle(data)?;
    let gamma = hfam.mle(data)?;
    Ok(hfam.log_likelihood(&gamma, data) - gfam.log_likelihood(&theta, data))
}

/// GLRT between two parametric families.
#[derive(Debug, Clone)]
pub struct FamilyScenario {
    pub gfam: FamilyModel,
    pub hfam: FamilyModel,
    pub side: Side,
    pub truth_params: Vec<f64>,
    pub b: f64,
    tilt: Option<(TiltedMeasure, LogMgfSpec, TiltSampler)>,
}

impl FamilyScenario {
    /// `truth_params` belong to `gfam` for type I and to `hfam` for type II.
    /// A tilt, when given, must be based at the truth.
    pub fn new(
        gfam: &FamilyModel,
        hfam: &FamilyModel,
        side: Side,
        truth_params: &[f64],
        b: f64,
        tilt: Option<TiltedMeasure>,
    ) -> Result<Self> {
        let truth = match side {
            Side::TypeI => gfam,
            Side::TypeII => hfam,
        };
        truth.check_params(truth_params)?;
        if !b.is_finite() {
            return Err(Error::Config("threshold b must be finite".into()));
        }
        let tilt = match tilt {
            None => None,
            Some(t) => {
                if t.gfam.id() != truth.id() || t.base_params != truth_params {
                    return Err(Error::Config(format!(
                        "tilt is based at `{}` {:?}, but the truth is `{}` {:?}",
                        t.gfam.id(),
                        t.base_params,
                        truth.id(),
                        truth_params
                    )));
                }
                let spec = t.spec();
                let sampler = TiltSampler::new(&t)?;
                Some((t, spec, sampler))
            }
        };
        Ok(Self {
            gfam: gfam.clone(),
            hfam: hfam.clone(),
            side,
            truth_params: truth_params.to_vec(),
            b,
            tilt,
        })
    }

    /// Threshold-zero test with the truth at the least favorable parameter of
    /// `side` and the matching tilt of the saddle.
    pub fn at_saddle(gfam: &FamilyModel, hfam: &FamilyModel, saddle: &ChernoffResult, side: Side) -> Result<Self> {
        let (truth, tilt) = match side {
            Side::TypeI => (&saddle.theta_star, TiltedMeasure::type_one(gfam, hfam, saddle)?),
            Side::TypeII => (&saddle.gamma_star, TiltedMeasure::type_two(gfam, hfam, saddle)?),
        };
        Self::new(gfam, hfam, side, truth, 0.0, Some(tilt))
    }

    pub fn tilt(&self) -> Option<&TiltedMeasure> {
        self.tilt.as_ref().map(|t| &t.0)
    }

    fn truth(&self) -> &FamilyModel {
        match self.side {
            Side::TypeI => &self.gfam,
            Side::TypeII => &self.hfam,
        }
    }
}

impl Scenario for FamilyScenario {
    fn side(&self) -> Side {
        self.side
    }

    fn replicate(&self, n: usize, method: Method, rng: &mut ChaCha8Rng) -> Result<Replicate> {
        let mut data = Vec::with_capacity(n);
        let mut log_weight = 0.0;
        match method {
            Method::Direct => {
                let fam = &self.truth().family;
                for _ in 0..n {
                    data.push(fam.sample(&self.truth_params, rng));
                }
            }
            Method::Tilted => {
                let (t, spec, sampler) = self
                    .tilt
                    .as_ref()
                    .ok_or_else(|| Error::Config("tilted sampling requested without a tilt".into()))?;
                for _ in 0..n {
                    let x = sampler.sample(rng);
                    log_weight += t.log_m_dag - t.lambda_dag * spec.log_ratio(x);
                    data.push(x);
                }
            }
        }
        let stat = glrt_statistic(&data, &self.gfam, &self.hfam)?;
        let cut = n as f64 * self.b;
        let event = match self.side {
            Side::TypeI => stat > cut,
            Side::TypeII => stat <= cut,
        };
        Ok(Replicate { event, log_weight })
    }
}

/// Random-design Gaussian regression: the event is
/// `RSS_X − RSS_Z > 2 n b` for least-squares fits on `(X₁, X₂)` and `(X₁, Z₁)`.
#[derive(Debug, Clone)]
pub struct JointScenario {
    pub model: GaussianJoint,
    pub saddle: JointRate,
    chol_truth: Matrix4<f64>,
    chol_tilt: Matrix4<f64>,
}

impl JointScenario {
    pub fn new(model: GaussianJoint, saddle: JointRate) -> Result<Self> {
        let factor = |m: Matrix4<f64>| {
            nalgebra::Cholesky::new(m)
                .map(|c| c.l())
                .ok_or_else(|| Error::Numeric("covariance is not positive definite".into()))
        };
        let chol_truth = factor(*model.covariance())?;
        let chol_tilt = factor(model.tilted_covariance(&saddle.theta_dag, &saddle.gamma_dag, saddle.lambda_dag)?)?;
        Ok(Self {
            model,
            saddle,
            chol_truth,
            chol_tilt,
        })
    }
}

/// `yᵀy − vᵀG⁻¹v` for a two-column least-squares fit.
fn rss(gram: &Matrix2<f64>, cross: &Vector2<f64>, yy: f64) -> f64 {
    match gram.try_inverse() {
        Some(inv) => yy - cross.dot(&(inv * cross)),
        None => yy,
    }
}

impl Scenario for JointScenario {
    fn side(&self) -> Side {
        Side::TypeI
    }

    fn replicate(&self, n: usize, method: Method, rng: &mut ChaCha8Rng) -> Result<Replicate> {
        let chol = match method {
            Method::Direct => &self.chol_truth,
            Method::Tilted => &self.chol_tilt,
        };
        let s = &self.saddle;
        let mut gx = Matrix2::zeros();
        let mut gz = Matrix2::zeros();
        let mut vx = Vector2::zeros();
        let mut vz = Vector2::zeros();
        let mut yy = 0.0;
        let mut log_weight = 0.0;
        for _ in 0..n {
            let e = Vector4::from_fn(|_, _| StandardNormal.sample(rng));
            let w = chol * e;
            let obs = self.model.observation(&w);
            if method == Method::Tilted {
                log_weight += s.log_m_dag - s.lambda_dag * self.model.log_ratio(&s.theta_dag, &s.gamma_dag, &obs);
            }
            let [x1, x2, z1, y] = obs;
            let rx = Vector2::new(x1, x2);
            let rz = Vector2::new(x1, z1);
            gx += rx * rx.transpose();
            gz += rz * rz.transpose();
            vx += rx * y;
            vz += rz * y;
            yy += y * y;
        }
        let event = rss(&gx, &vx, yy) - rss(&gz, &vz, yy) > 2.0 * n as f64 * self.model.b;
        Ok(Replicate { event, log_weight })
    }
}

/// Fixed-design GLM test: the event is
/// `sup_γ ℓ_Z(γ) − sup_β ℓ_X(β) > n b` on the design's rows.
#[derive(Debug, Clone)]
pub struct GlmScenario {
    pub design: GlmDesign,
    pub b: f64,
    eta_tilt: Vec<f64>,
}

impl GlmScenario {
    pub fn new(design: GlmDesign, beta: &[f64], gamma: &[f64], lambda: f64, b: f64) -> Result<Self> {
        let eta_tilt = design.tilted_eta(beta, gamma, lambda)?.as_slice().to_vec();
        Ok(Self { design, b, eta_tilt })
    }
}

impl Scenario for GlmScenario {
    fn side(&self) -> Side {
        Side::TypeI
    }

    fn replicate(&self, n: usize, method: Method, rng: &mut ChaCha8Rng) -> Result<Replicate> {
        if n != self.design.n() {
            return Err(Error::Config(format!(
                "the GLM design has {} rows; sample size {n} was requested",
                self.design.n()
            )));
        }
        let c = self.design.cumulant;
        let eta0 = self.design.eta0();
        let mut y = Vec::with_capacity(n);
        let mut log_weight = 0.0;
        for i in 0..n {
            match method {
                Method::Direct => y.push(c.sample(eta0[i], rng)),
                Method::Tilted => {
                    let eq = self.eta_tilt[i];
                    let yi = c.sample(eq, rng);
                    log_weight += (eta0[i] - eq) * yi + c.b(eq) - c.b(eta0[i]);
                    y.push(yi);
                }
            }
        }
        let lz = glm_fit(&self.design.z, &y, c)?.1;
        let lx = glm_fit(&self.design.x, &y, c)?.1;
        Ok(Replicate {
            event: lz - lx > n as f64 * self.b,
            log_weight,
        })
    }
}

/// Running sums of event weights, scaled by `exp(shift)`.
#[derive(Debug, Clone, Copy)]
struct Accumulator {
    reps: u64,
    events: u64,
    shift: f64,
    s1: f64,
    s2: f64,
}

impl Accumulator {
    fn new() -> Self {
        Self {
            reps: 0,
            events: 0,
            shift: f64::NEG_INFINITY,
            s1: 0.0,
            s2: 0.0,
        }
    }

    fn rescale(&mut self, shift: f64) {
        if shift > self.shift {
            if self.shift.is_finite() {
                let r = (self.shift - shift).exp();
                self.s1 *= r;
                self.s2 *= r * r;
            }
            self.shift = shift;
        }
    }

    fn push(&mut self, r: Replicate) {
        self.reps += 1;
        if !r.event {
            return;
        }
        self.events += 1;
        self.rescale(r.log_weight);
        let w = (r.log_weight - self.shift).exp();
        self.s1 += w;
        self.s2 += w * w;
    }

    fn merge(&mut self, other: &Accumulator) {
        self.reps += other.reps;
        self.events += other.events;
        if other.events == 0 {
            return;
        }
        self.rescale(other.shift);
        let r = (other.shift - self.shift).exp();
        self.s1 += other.s1 * r;
        self.s2 += other.s2 * r * r;
    }

    fn estimate(&self, method: Method, ess_floor: f64) -> ISEstimate {
        let reps = self.reps as f64;
        let (p_hat, std_err, ess) = if self.events == 0 || self.reps == 0 {
            (0.0, 0.0, 0.0)
        } else {
            let scale = self.shift.exp();
            let p = scale * self.s1 / reps;
            let se = match method {
                Method::Direct => (p * (1.0 - p) / reps).max(0.0).sqrt(),
                Method::Tilted => {
                    let m1 = self.s1 / reps;
                    let m2 = self.s2 / reps;
                    let var = (m2 - m1 * m1).max(0.0);
                    if self.reps > 1 {
                        scale * (var / (reps - 1.0)).sqrt()
                    } else {
                        0.0
                    }
                }
            };
            (p, se, self.s1 * self.s1 / self.s2)
        };
        ISEstimate {
            p_hat,
            std_err,
            rel_err: if p_hat > 0.0 { std_err / p_hat } else { f64::INFINITY },
            ess,
            reps: self.reps,
            method,
            low_ess: ess < ess_floor,
        }
    }
}

/// A (possibly weighted) Monte Carlo estimate of an error probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ISEstimate {
    pub p_hat: f64,
    pub std_err: f64,
    /// `std_err / p_hat`; infinite when no event was observed.
    pub rel_err: f64,
    /// `(Σw)² / Σw²` over the replications.
    pub ess: f64,
    pub reps: u64,
    pub method: Method,
    /// ESS fell below the configured floor.
    pub low_ess: bool,
}

/// ESS below which an estimate is flagged.
pub const DEFAULT_ESS_FLOOR: f64 = 50.0;

fn stream_key(n: usize, rep: u64) -> u64 {
    ((n as u64) << 40) | rep
}

fn run_range<S: Scenario + ?Sized>(
    scenario: &S,
    n: usize,
    method: Method,
    seed: u64,
    reps: Range<u64>,
    acc: &mut Accumulator,
) -> Result<()> {
    let mut start = reps.start;
    while start < reps.end {
        let end = (start + CHUNK).min(reps.end);
        let batch: Vec<Replicate> = (start..end)
            .into_par_iter()
            .map(|r| {
                let mut rng = rng::stream(seed, stream_key(n, r));
                scenario.replicate(n, method, &mut rng)
            })
            .collect::<Result<_>>()?;
        let mut part = Accumulator::new();
        for r in batch {
            part.push(r);
        }
        acc.merge(&part);
        start = end;
    }
    Ok(())
}

/// Estimate from `reps` replications drawn with `method`.
pub fn estimate<S: Scenario + ?Sized>(scenario: &S, n: usize, method: Method, reps: u64, seed: u64) -> Result<ISEstimate> {
    if reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    let mut acc = Accumulator::new();
    run_range(scenario, n, method, seed, 0..reps, &mut acc)?;
    Ok(acc.estimate(method, DEFAULT_ESS_FLOOR))
}

/// Fraction of replications under the truth in which the event occurs.
pub fn direct_mc<S: Scenario + ?Sized>(scenario: &S, n: usize, reps: u64, seed: u64) -> Result<ISEstimate> {
    estimate(scenario, n, Method::Direct, reps, seed)
}

/// Importance-sampling estimate under the scenario's tilt.
pub fn is_mc<S: Scenario + ?Sized>(scenario: &S, n: usize, reps: u64, seed: u64) -> Result<ISEstimate> {
    estimate(scenario, n, Method::Tilted, reps, seed)
}

/// Settings for [`decay_curve`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecayConfig {
    pub method: Method,
    /// Fixed replication count per sample size; adaptive when absent.
    pub reps: Option<u64>,
    pub target_rel_err: f64,
    pub pilot_reps: u64,
    pub max_reps: u64,
    pub ess_floor: f64,
}

impl Default for DecayConfig {
    fn default() -> Self {
        Self {
            method: Method::Tilted,
            reps: None,
            target_rel_err: 0.1,
            pilot_reps: 2000,
            max_reps: 10_000_000,
            ess_floor: DEFAULT_ESS_FLOOR,
        }
    }
}

/// Least-squares line through `(n, log p_hat)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayFit {
    pub slope: f64,
    pub intercept: f64,
    pub points_used: usize,
    /// Standard error of the slope; NaN with two points.
    pub slope_std_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayCurve {
    pub side: Side,
    pub sample_sizes: Vec<usize>,
    pub estimates: Vec<ISEstimate>,
    pub fit: Option<DecayFit>,
    pub warnings: Vec<String>,
}

impl DecayCurve {
    pub fn slope(&self) -> Option<f64> {
        self.fit.map(|f| f.slope)
    }

    /// CSV with columns `n, p_hat, std_err, ess, method`.
    pub fn write_csv<W: Write>(&self, out: W, raw: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n", "p_hat", "std_err", "ess", "method"])?;
        for (n, e) in self.sample_sizes.iter().zip(&self.estimates) {
            w.write_record([
                n.to_string(),
                number(e.p_hat, raw),
                number(e.std_err, raw),
                number(e.ess, raw),
                e.method.as_str().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Least squares of `log p` on `n` over the positive estimates.
pub fn fit_decay(sample_sizes: &[usize], estimates: &[ISEstimate]) -> Result<DecayFit> {
    let pts: Vec<(f64, f64)> = sample_sizes
        .iter()
        .zip(estimates)
        .filter(|(_, e)| e.p_hat > 0.0)
        .map(|(&n, e)| (n as f64, e.p_hat.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Fit(pts.len()));
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Fit(1));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_std_err = if pts.len() > 2 {
        let sse: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        (sse / (k - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    Ok(DecayFit {
        slope,
        intercept,
        points_used: pts.len(),
        slope_std_err,
    })
}

/// Estimate at one sample size, adding replications until the relative
/// error reaches the target or the cap is hit.
pub fn adaptive_estimate<S: Scenario + ?Sized>(
    scenario: &S,
    n: usize,
    config: &DecayConfig,
    seed: u64,
    warnings: &mut Vec<String>,
) -> Result<ISEstimate> {
    let method = config.method;
    let mut acc = Accumulator::new();
    if let Some(reps) = config.reps {
        run_range(scenario, n, method, seed, 0..reps.max(1), &mut acc)?;
    } else {
        let cap = config.max_reps.max(1);
        let mut done = 0;
        let mut next = config.pilot_reps.clamp(1, cap);
        for _ in 0..64 {
            run_range(scenario, n, method, seed, done..next, &mut acc)?;
            done = next;
            let e = acc.estimate(method, config.ess_floor);
            if done >= cap || (e.p_hat > 0.0 && e.rel_err <= config.target_rel_err) {
                break;
            }
            next = if e.p_hat > 0.0 && acc.events >= 10 {
                let need = (done as f64 * (e.rel_err / config.target_rel_err).powi(2) * 1.1).ceil();
                (need as u64).max(done + done / 10 + 1)
            } else {
                done.saturating_mul(10)
            }
            .min(cap);
        }
        let e = acc.estimate(method, config.ess_floor);
        if !(e.p_hat > 0.0 && e.rel_err <= config.target_rel_err) {
            let msg = format!(
                "n = {n}: replication cap {cap} reached with relative error {}",
                number(e.rel_err, false)
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    let e = acc.estimate(method, config.ess_floor);
    if e.low_ess {
        let msg = format!("n = {n}: effective sample size {} below floor", number(e.ess, false));
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(e)
}

/// Estimates over `n_list` and the fitted decay slope. Zero estimates are
/// left out of the fit with a warning; fewer than two positive estimates
/// leave `fit` empty and add a warning. A single sample size is not fitted.
pub fn decay_curve<S: Scenario + ?Sized>(scenario: &S, n_list: &[usize], config: &DecayConfig, seed: u64) -> Result<DecayCurve> {
    if n_list.is_empty() || n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("n_list must be nonempty and strictly ascending".into()));
    }
    if !(config.target_rel_err > 0.0) {
        return Err(Error::Config("target_rel_err must be positive".into()));
    }
    let mut warnings = Vec::new();
    let mut estimates = Vec::with_capacity(n_list.len());
    for &n in n_list {
        estimates.push(adaptive_estimate(scenario, n, config, seed, &mut warnings)?);
    }
    for (n, e) in n_list.iter().zip(&estimates) {
        if e.p_hat == 0.0 {
            let msg = format!("n = {n}: zero estimate excluded from the fit");
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    let fit = match fit_decay(n_list, &estimates) {
        Ok(f) => Some(f),
        Err(_) if n_list.len() == 1 => None,
        Err(e) => {
            warnings.push(e.to_string());
            None
        }
    };
    Ok(DecayCurve {
        side: scenario.side(),
        sample_sizes: n_list.to_vec(),
        estimates,
        fit,
        warnings,
    })
}

/// Type-I and type-II error estimates at the least favorable pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaxErrorProbe {
    pub type_i: ISEstimate,
    pub type_ii: ISEstimate,
}

/// Importance-sampling estimates of both error probabilities at threshold
/// zero with the truth at `θ*` and at `γ*`.
pub fn max_error_probe(
    gfam: &FamilyModel,
    hfam: &FamilyModel,
    saddle: &ChernoffResult,
    n: usize,
    reps: u64,
    seed: u64,
) -> Result<MaxErrorProbe> {
    let one = FamilyScenario::at_saddle(gfam, hfam, saddle, Side::TypeI)?;
    let two = FamilyScenario::at_saddle(gfam, hfam, saddle, Side::TypeII)?;
    Ok(MaxErrorProbe {
        type_i: is_mc(&one, n, reps, seed)?,
        type_ii: is_mc(&two, n, reps, seed)?,
    })
}
