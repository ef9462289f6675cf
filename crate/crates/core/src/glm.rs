//! Error exponents for generalized linear models.
//!
//! With responses `Y_i` from a canonical exponential family with cumulant
//! `b`, null covariates `X^{(i)}` and alternative covariates `Z^{(i)}`,
//!
//! `ρ̃_n(β,γ,λ) = (1/n) Σ { λ[b(γᵀZ) − b(βᵀX)] + b(β⁰ᵀX) − b(β⁰ᵀX + λ(γᵀZ − βᵀX)) }`
//!
//! and `ρ̃†_n = sup_{β∈B_n} inf_γ sup_λ ρ̃_n`. The module also carries the
//! closed form for the random-design Gaussian model where `(X₁, X₂, Z₁)` are
//! jointly normal and the alternative regresses on `(X₁, Z₁)`.

use std::io::Read;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Matrix3, Matrix4, SymmetricEigen, Vector2, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Tail};
use crate::families::Support;
use crate::nonsep::{EulerCondition, EulerReport, Placement, EULER_TOL};
use crate::optim::{brent_root, lex_cmp, nelder_mead, NelderMeadOptions, SearchSpace};
use crate::rng;

/// Canonical cumulant functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cumulant {
    /// `b(u) = u²/2`, unit-variance normal responses.
    Gaussian,
    /// `b(u) = eᵘ`.
    Poisson,
    /// `b(u) = log(1 + eᵘ)`.
    Bernoulli,
}

impl Cumulant {
    pub fn b(self, u: f64) -> f64 {
        match self {
            Cumulant::Gaussian => 0.5 * u * u,
            Cumulant::Poisson => u.exp(),
            Cumulant::Bernoulli => softplus(u),
        }
    }

    pub fn b1(self, u: f64) -> f64 {
        match self {
            Cumulant::Gaussian => u,
            Cumulant::Poisson => u.exp(),
            Cumulant::Bernoulli => logistic(u),
        }
    }

    pub fn b2(self, u: f64) -> f64 {
        match self {
            Cumulant::Gaussian => 1.0,
            Cumulant::Poisson => u.exp(),
            Cumulant::Bernoulli => {
                let p = logistic(u);
                p * (1.0 - p)
            }
        }
    }

    pub fn support(self) -> Support {
        match self {
            Cumulant::Gaussian => Support::Interval {
                lo: f64::NEG_INFINITY,
                hi: f64::INFINITY,
            },
            Cumulant::Poisson => Support::Lattice { max: None },
            Cumulant::Bernoulli => Support::Lattice { max: Some(1) },
        }
    }

    /// `log c(y)` of the density `exp{η y − b(η) + log c(y)}`.
    pub fn log_base(self, y: f64) -> f64 {
        match self {
            Cumulant::Gaussian => -0.5 * (y * y + (2.0 * std::f64::consts::PI).ln()),
            Cumulant::Poisson => -statrs::function::gamma::ln_gamma(y + 1.0),
            Cumulant::Bernoulli => 0.0,
        }
    }

    /// One response with natural parameter `eta`.
    pub fn sample<R: Rng + ?Sized>(self, eta: f64, rng: &mut R) -> f64 {
        match self {
            Cumulant::Gaussian => {
                let z: f64 = StandardNormal.sample(rng);
                eta + z
            }
            Cumulant::Poisson => {
                let mean = eta.exp();
                if mean <= 0.0 {
                    return 0.0;
                }
                Poisson::new(mean).map_or(0.0, |d| d.sample(rng))
            }
            Cumulant::Bernoulli => {
                if rng::open01(rng) < logistic(eta) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Sum with a fixed pairwise reduction tree.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Fixed design for the GLM comparison.
#[derive(Debug, Clone)]
pub struct GlmDesign {
    /// `n × p` null-model covariates.
    pub x: DMatrix<f64>,
    /// `n × q` alternative covariates.
    pub z: DMatrix<f64>,
    pub beta0: DVector<f64>,
    pub cumulant: Cumulant,
    eta0: DVector<f64>,
}

/// Regularity summary of a design.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignCheck {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub max_row_norm_x: f64,
    pub max_row_norm_z: f64,
    /// Smallest eigenvalue of `XᵀX / n`.
    pub min_eigen_x: f64,
    pub full_rank: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    beta0: Vec<f64>,
    cumulant: Cumulant,
}

impl GlmDesign {
    pub fn new(x: DMatrix<f64>, z: DMatrix<f64>, beta0: DVector<f64>, cumulant: Cumulant) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 || z.ncols() == 0 {
            return Err(Error::Dimension("design blocks must be nonempty".into()));
        }
        if x.nrows() != z.nrows() {
            return Err(Error::Dimension(format!(
                "X has {} rows but Z has {}",
                x.nrows(),
                z.nrows()
            )));
        }
        if beta0.len() != x.ncols() {
            return Err(Error::Dimension(format!(
                "beta0 has length {} but X has {} columns",
                beta0.len(),
                x.ncols()
            )));
        }
        if x.iter().chain(z.iter()).chain(beta0.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("design entries must be finite".into()));
        }
        let eta0 = &x * &beta0;
        Ok(Self {
            x,
            z,
            beta0,
            cumulant,
            eta0,
        })
    }

    /// Loads a CSV whose header tags columns `x…` (null block) and `z…`
    /// (alternative block), with a JSON sidecar `{beta0, cumulant}`.
    pub fn load(csv_path: &Path, sidecar_path: &Path) -> Result<Self> {
        let side: Sidecar = serde_json::from_reader(std::fs::File::open(sidecar_path)?)?;
        Self::from_csv_reader(std::fs::File::open(csv_path)?, DVector::from_vec(side.beta0), side.cumulant)
    }

    pub fn from_csv_reader<R: Read>(reader: R, beta0: DVector<f64>, cumulant: Cumulant) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let mut xcols = Vec::new();
        let mut zcols = Vec::new();
        for (i, h) in headers.iter().enumerate() {
            match h.chars().next().map(|c| c.to_ascii_lowercase()) {
                Some('x') => xcols.push(i),
                Some('z') => zcols.push(i),
                _ => {
                    return Err(Error::Config(format!(
                        "design column `{h}` is neither an x… nor a z… column"
                    )))
                }
            }
        }
        let mut xs = Vec::new();
        let mut zs = Vec::new();
        let mut n = 0;
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("row {}: column `{}`: {e}", n + 1, &headers[i])))
            };
            for &i in &xcols {
                xs.push(parse(i)?);
            }
            for &i in &zcols {
                zs.push(parse(i)?);
            }
            n += 1;
        }
        let x = DMatrix::from_row_slice(n, xcols.len(), &xs);
        let z = DMatrix::from_row_slice(n, zcols.len(), &zs);
        Self::new(x, z, beta0, cumulant)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn check(&self) -> DesignCheck {
        let n = self.n();
        let row_max = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).norm()).fold(0.0, f64::max);
        let gram = self.x.transpose() * &self.x / n as f64;
        let min_eigen_x = SymmetricEigen::new(gram).eigenvalues.min();
        DesignCheck {
            n,
            p: self.x.ncols(),
            q: self.z.ncols(),
            max_row_norm_x: row_max(&self.x),
            max_row_norm_z: row_max(&self.z),
            min_eigen_x,
            full_rank: min_eigen_x > 1e-10,
        }
    }

    fn dims(&self, beta: &[f64], gamma: &[f64]) -> Result<()> {
        if beta.len() != self.x.ncols() || gamma.len() != self.z.ncols() {
            return Err(Error::Dimension(format!(
                "expected β of length {} and γ of length {}, got {} and {}",
                self.x.ncols(),
                self.z.ncols(),
                beta.len(),
                gamma.len()
            )));
        }
        Ok(())
    }

    fn linear(&self, beta: &[f64], gamma: &[f64]) -> (DVector<f64>, DVector<f64>) {
        (
            &self.x * DVector::from_column_slice(beta),
            &self.z * DVector::from_column_slice(gamma),
        )
    }

    /// Natural parameters of the tilted responses.
    pub fn tilted_eta(&self, beta: &[f64], gamma: &[f64], lambda: f64) -> Result<DVector<f64>> {
        self.dims(beta, gamma)?;
        let (xb, zg) = self.linear(beta, gamma);
        Ok(&self.eta0 + (zg - xb) * lambda)
    }

    pub fn eta0(&self) -> &DVector<f64> {
        &self.eta0
    }
}

/// Row terms of ρ̃ and of its first two λ-derivatives.
fn rho_parts(design: &GlmDesign, xb: &DVector<f64>, zg: &DVector<f64>, lambda: f64) -> (f64, f64, f64) {
    let c = design.cumulant;
    let n = design.n();
    let mut v = Vec::with_capacity(n);
    let mut d1 = Vec::with_capacity(n);
    let mut d2 = Vec::with_capacity(n);
    for i in 0..n {
        let (e0, x, z) = (design.eta0[i], xb[i], zg[i]);
        let d = z - x;
        let gap = c.b(z) - c.b(x);
        let eta = e0 + lambda * d;
        v.push(lambda * gap + c.b(e0) - c.b(eta));
        d1.push(gap - c.b1(eta) * d);
        d2.push(-c.b2(eta) * d * d);
    }
    let nf = n as f64;
    (pairwise_sum(&v) / nf, pairwise_sum(&d1) / nf, pairwise_sum(&d2) / nf)
}

/// `ρ̃_n(β, γ, λ)`.
pub fn rho_tilde(design: &GlmDesign, beta: &[f64], gamma: &[f64], lambda: f64) -> Result<f64> {
    design.dims(beta, gamma)?;
    let (xb, zg) = design.linear(beta, gamma);
    Ok(rho_parts(design, &xb, &zg, lambda).0)
}

/// `∂ρ̃_n/∂λ`.
pub fn rho_tilde_dlambda(design: &GlmDesign, beta: &[f64], gamma: &[f64], lambda: f64) -> Result<f64> {
    design.dims(beta, gamma)?;
    let (xb, zg) = design.linear(beta, gamma);
    Ok(rho_parts(design, &xb, &zg, lambda).1)
}

/// `sup_{λ≥0} ρ̃_n(β, γ, λ)` and its maximizer.
fn sup_lambda_linear(design: &GlmDesign, xb: &DVector<f64>, zg: &DVector<f64>) -> Result<(f64, f64)> {
    let (_, d0, dd0) = rho_parts(design, xb, zg, 0.0);
    if d0 <= 0.0 || dd0 == 0.0 {
        return Ok((0.0, 0.0));
    }
    let deriv = |l: f64| rho_parts(design, xb, zg, l).1;
    let mut lo = 0.0;
    let mut flo = d0;
    let mut hi = 1.0;
    let mut fhi = deriv(hi);
    let mut doublings = 0;
    while fhi > 0.0 {
        lo = hi;
        flo = fhi;
        hi *= 2.0;
        fhi = deriv(hi);
        doublings += 1;
        if doublings > 60 {
            return Err(Error::Divergence {
                tail: Tail::Upper,
                context: "ρ̃ increases without bound in λ".into(),
            });
        }
    }
    if fhi.is_nan() {
        fhi = -f64::MAX;
    }
    let lambda = brent_root(|l| Ok(deriv(l)), lo, hi, flo, fhi, 1e-13, 300)?;
    Ok((rho_parts(design, xb, zg, lambda).0, lambda))
}

/// `sup_{λ≥0} ρ̃_n(β, γ, λ)` with its maximizer.
pub fn sup_lambda(design: &GlmDesign, beta: &[f64], gamma: &[f64]) -> Result<(f64, f64)> {
    design.dims(beta, gamma)?;
    let (xb, zg) = design.linear(beta, gamma);
    sup_lambda_linear(design, &xb, &zg)
}

/// Outcome of the `B_n` membership test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BnCheck {
    pub member: bool,
    /// `inf_γ ∂λ ρ̃_n(β, γ, 0)`.
    pub inf_value: f64,
    pub gamma_argmin: Vec<f64>,
    pub converged: bool,
}

/// Minimizer of the convex `φ(γ) = (1/n) Σ [b(γᵀZ) − b'(β⁰ᵀX) γᵀZ]` by damped
/// Newton; returns `(γ, φ(γ), converged)`.
fn bn_inner(design: &GlmDesign) -> (DVector<f64>, f64, bool) {
    let c = design.cumulant;
    let z = &design.z;
    let n = design.n() as f64;
    let mu0: DVector<f64> = design.eta0.map(|e| c.b1(e));
    let phi = |g: &DVector<f64>| -> f64 {
        let zg = z * g;
        let v: Vec<f64> = (0..zg.len()).map(|i| c.b(zg[i]) - mu0[i] * zg[i]).collect();
        pairwise_sum(&v) / n
    };
    let q = z.ncols();
    let mut g = DVector::<f64>::zeros(q);
    let mut f = phi(&g);
    let mut converged = false;
    for _ in 0..200 {
        let zg = z * &g;
        let resid = DVector::from_fn(zg.len(), |i, _| c.b1(zg[i]) - mu0[i]);
        let grad = z.transpose() * &resid / n;
        let w = DVector::from_fn(zg.len(), |i, _| c.b2(zg[i]));
        let mut h = z.transpose() * DMatrix::from_diagonal(&w) * z / n;
        let ridge = 1e-12 * (1.0 + h.diagonal().max());
        for k in 0..q {
            h[(k, k)] += ridge;
        }
        let Some(chol) = Cholesky::new(h) else { break };
        let step = chol.solve(&grad);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &g - &step * t;
            let fc = phi(&cand);
            if fc.is_finite() && fc <= f - 1e-4 * t * grad.dot(&step) {
                g = cand;
                let done = (f - fc).abs() <= 1e-15 * (1.0 + f.abs());
                f = fc;
                accepted = true;
                if done {
                    converged = true;
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted || grad.norm() < 1e-12 {
            converged = converged || grad.norm() < 1e-8;
            break;
        }
        if converged {
            break;
        }
    }
    (g, f, converged)
}

fn bn_value(design: &GlmDesign, beta: &[f64], phi_min: f64) -> f64 {
    let c = design.cumulant;
    let xb = &design.x * DVector::from_column_slice(beta);
    let v: Vec<f64> = (0..xb.len())
        .map(|i| c.b1(design.eta0[i]) * xb[i] - c.b(xb[i]))
        .collect();
    phi_min + pairwise_sum(&v) / design.n() as f64
}

/// Detailed `B_n` membership test.
pub fn bn_check(design: &GlmDesign, beta: &[f64]) -> Result<BnCheck> {
    if beta.len() != design.x.ncols() {
        return Err(Error::Dimension(format!("β must have length {}", design.x.ncols())));
    }
    let (g, phi_min, converged) = bn_inner(design);
    let inf_value = bn_value(design, beta, phi_min);
    Ok(BnCheck {
        member: converged && inf_value >= -1e-9,
        inf_value,
        gamma_argmin: g.as_slice().to_vec(),
        converged,
    })
}

/// Whether `β ∈ B_n = {β : inf_γ ∂λ ρ̃_n(β, γ, 0) ≥ 0}`.
pub fn in_bn(design: &GlmDesign, beta: &[f64]) -> Result<bool> {
    Ok(bn_check(design, beta)?.member)
}

/// Settings for [`glm_rate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlmRateConfig {
    /// Half-width of the β search box around β⁰.
    pub beta_half_width: f64,
    /// Half-width of the γ search box around the least-squares start.
    pub gamma_half_width: f64,
    pub max_iter: usize,
    pub xtol: f64,
}

impl Default for GlmRateConfig {
    fn default() -> Self {
        Self {
            beta_half_width: 5.0,
            gamma_half_width: 10.0,
            max_iter: 400,
            xtol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlmRate {
    pub rho: f64,
    pub beta_dag: Vec<f64>,
    pub gamma_dag: Vec<f64>,
    pub lambda_dag: f64,
    pub design: DesignCheck,
}

/// Least-squares `γ` with `Zγ ≈ target`.
fn least_squares(z: &DMatrix<f64>, target: &DVector<f64>) -> DVector<f64> {
    let zt = z.transpose();
    let mut g = &zt * z;
    let ridge = 1e-12 * (1.0 + g.diagonal().max());
    for k in 0..g.nrows() {
        g[(k, k)] += ridge;
    }
    match Cholesky::new(g) {
        Some(ch) => ch.solve(&(zt * target)),
        None => DVector::zeros(z.ncols()),
    }
}

/// `inf_γ sup_λ ρ̃_n(β, γ, λ)` with the minimizing γ and λ.
fn inf_gamma(design: &GlmDesign, beta: &[f64], start_b: &DVector<f64>, config: &GlmRateConfig) -> (f64, Vec<f64>, f64) {
    let xb = &design.x * DVector::from_column_slice(beta);
    let g_ls = least_squares(&design.z, &xb);
    let lower: Vec<f64> = g_ls.iter().map(|v| v - config.gamma_half_width).collect();
    let upper: Vec<f64> = g_ls.iter().map(|v| v + config.gamma_half_width).collect();
    let space = SearchSpace::linear(&lower, &upper);
    let objective = |g: &[f64]| -> f64 {
        let zg = &design.z * DVector::from_column_slice(g);
        sup_lambda_linear(design, &xb, &zg).map_or(f64::INFINITY, |r| r.0)
    };
    let opts = NelderMeadOptions {
        max_iter: config.max_iter,
        xtol: config.xtol,
        initial_step: 0.02,
        ..Default::default()
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    for s in [g_ls.as_slice(), start_b.as_slice()] {
        let mut u = s.to_vec();
        space.clip(&mut u);
        let r = nelder_mead(&objective, &u, &space, &opts);
        if best.as_ref().is_none_or(|b| r.fx < b.1 || (r.fx == b.1 && lex_cmp(&r.x, &b.0).is_lt())) {
            best = Some((r.x, r.fx));
        }
    }
    let (g, v) = best.expect("two starts");
    let zg = &design.z * DVector::from_column_slice(&g);
    let lambda = sup_lambda_linear(design, &xb, &zg).map_or(f64::NAN, |r| r.1);
    (v, g, lambda)
}

/// Fixed-design exponent `ρ̃†_n = sup_{β∈B_n} inf_γ sup_λ ρ̃_n`.
pub fn glm_rate(design: &GlmDesign, config: &GlmRateConfig) -> Result<GlmRate> {
    let check = design.check();
    if !check.full_rank {
        return Err(Error::Config(format!(
            "XᵀX/n is singular (smallest eigenvalue {:.3e})",
            check.min_eigen_x
        )));
    }
    let (g_b, phi_min, conv) = bn_inner(design);
    if !conv {
        return Err(Error::Optimization {
            reason: "the B_n inner minimization over γ did not converge".into(),
            incumbent: Some((g_b.as_slice().to_vec(), phi_min)),
        });
    }
    let beta0 = design.beta0.as_slice();
    let lower: Vec<f64> = beta0.iter().map(|v| v - config.beta_half_width).collect();
    let upper: Vec<f64> = beta0.iter().map(|v| v + config.beta_half_width).collect();
    let space = SearchSpace::linear(&lower, &upper);
    let objective = |beta: &[f64]| -> f64 {
        if bn_value(design, beta, phi_min) < -1e-9 {
            return f64::INFINITY;
        }
        let v = inf_gamma(design, beta, &g_b, config).0;
        if v.is_finite() {
            -v
        } else {
            f64::INFINITY
        }
    };
    let opts = NelderMeadOptions {
        max_iter: config.max_iter,
        xtol: config.xtol,
        initial_step: 0.02,
        ..Default::default()
    };
    let p = beta0.len();
    let mut starts = vec![beta0.to_vec()];
    for k in 0..p {
        for sign in [1.0, -1.0] {
            let mut s = beta0.to_vec();
            s[k] += sign * 0.1 * config.beta_half_width;
            starts.push(s);
        }
    }
    let mut best: Option<(Vec<f64>, f64)> = None;
    for s in &starts {
        if objective(s).is_infinite() {
            continue;
        }
        let r = nelder_mead(&objective, s, &space, &opts);
        if best.as_ref().is_none_or(|b| r.fx < b.1 || (r.fx == b.1 && lex_cmp(&r.x, &b.0).is_lt())) {
            best = Some((r.x, r.fx));
        }
    }
    let Some((beta, _)) = best else {
        return Err(Error::Optimization {
            reason: "no feasible β start".into(),
            incumbent: None,
        });
    };
    let (v, gamma, lambda) = inf_gamma(design, &beta, &g_b, config);
    if !v.is_finite() {
        return Err(Error::Optimization {
            reason: "inner problem not finite at the incumbent".into(),
            incumbent: Some((beta, v)),
        });
    }
    Ok(GlmRate {
        rho: v.max(0.0),
        beta_dag: beta,
        gamma_dag: gamma,
        lambda_dag: lambda,
        design: check,
    })
}

/// Response vectors drawn under the GLM tilt: `Y_i` has natural parameter
/// `β⁰ᵀX + λ(γᵀZ − βᵀX)`. Replication `r` uses the stream `(seed, r)`.
pub fn glm_tilted_sampler(
    design: &GlmDesign,
    beta_dag: &[f64],
    gamma_dag: &[f64],
    lambda_dag: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let eta = design.tilted_eta(beta_dag, gamma_dag, lambda_dag)?;
    Ok((0..count)
        .map(|r| {
            let mut rng = rng::stream(seed, r as u64);
            eta.iter().map(|&e| design.cumulant.sample(e, &mut rng)).collect()
        })
        .collect())
}

/// Maximum of `Σ [y η − b(η)]` over `η = Mβ` by damped Newton (IRLS);
/// returns `(β, value)`. When the supremum is not attained (e.g. separated
/// binary data) the value reached after the iteration cap is returned.
pub fn glm_fit(m: &DMatrix<f64>, y: &[f64], cumulant: Cumulant) -> Result<(DVector<f64>, f64)> {
    if m.nrows() != y.len() {
        return Err(Error::Dimension(format!("{} rows but {} responses", m.nrows(), y.len())));
    }
    let yv = DVector::from_column_slice(y);
    let ll = |beta: &DVector<f64>| -> f64 {
        let eta = m * beta;
        let v: Vec<f64> = (0..eta.len()).map(|i| y[i] * eta[i] - cumulant.b(eta[i])).collect();
        pairwise_sum(&v)
    };
    if cumulant == Cumulant::Gaussian {
        let beta = least_squares(m, &yv);
        let v = ll(&beta);
        return Ok((beta, v));
    }
    let p = m.ncols();
    let mut beta = DVector::<f64>::zeros(p);
    let mut f = ll(&beta);
    for _ in 0..100 {
        let eta = m * &beta;
        let resid = DVector::from_fn(eta.len(), |i, _| y[i] - cumulant.b1(eta[i]));
        let grad = m.transpose() * &resid;
        let w = DVector::from_fn(eta.len(), |i, _| cumulant.b2(eta[i]));
        let mut h = m.transpose() * DMatrix::from_diagonal(&w) * m;
        let ridge = 1e-10 * (1.0 + h.diagonal().max());
        for k in 0..p {
            h[(k, k)] += ridge;
        }
        let Some(chol) = Cholesky::new(h) else { break };
        let step = chol.solve(&grad);
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..50 {
            let cand = &beta + &step * t;
            let fc = ll(&cand);
            if fc.is_finite() && fc >= f {
                let gain = fc - f;
                beta = cand;
                f = fc;
                improved = gain > 1e-12 * (1.0 + f.abs());
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok((beta, f))
}

/// Closed-form exponent for the random-design Gaussian model: null
/// `Y = θ₁X₁ + θ₂X₂ + ε`, alternative `Y = γ₁X₁ + γ₂Z₁ + ε`, unit noise
/// variances, `(X₁, X₂, Z₁) ~ N(0, Σ)` and truth `Y = β⁰ᵀ(X₁, X₂) + ε`.
///
/// With `w = (X₁, X₂, Z₁, ε)`, the log-ratio is
/// `l = ½(aᵀw)² − ½(cᵀw)² − b` where `a = (β⁰₁−θ₁, β⁰₂−θ₂, 0, 1)` and
/// `c = (β⁰₁−γ₁, β⁰₂, −γ₂, 1)`, and
/// `E exp(λl) = det(I − λS(aaᵀ − ccᵀ))^{−1/2} e^{−λb}` with
/// `det = 1 + λB + λ²A`, `B = cᵀSc − aᵀSa`, `A = (aᵀSc)² − aᵀSa·cᵀSc`.
#[derive(Debug, Clone)]
pub struct GaussianJoint {
    pub sigma: Matrix3<f64>,
    pub beta0: Vector2<f64>,
    pub b: f64,
    s: Matrix4<f64>,
}

/// The saddle of the joint Gaussian program.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointRate {
    pub rho: f64,
    pub theta_dag: Vec<f64>,
    pub gamma_dag: Vec<f64>,
    pub lambda_dag: f64,
    #[serde(rename = "log_M_dag")]
    pub log_m_dag: f64,
    pub b: f64,
}

/// Settings for [`gaussian_joint_rate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointConfig {
    /// Half-width of the θ and γ search boxes.
    pub half_width: f64,
    pub grid: usize,
    pub starts: usize,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            half_width: 6.0,
            grid: 13,
            starts: 3,
        }
    }
}

impl GaussianJoint {
    pub fn new(sigma: Matrix3<f64>, beta0: Vector2<f64>, b: f64) -> Result<Self> {
        if Cholesky::new(sigma).is_none() || (sigma - sigma.transpose()).abs().max() > 1e-12 {
            return Err(Error::Config("Σ must be symmetric positive definite".into()));
        }
        if !b.is_finite() || beta0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("β⁰ and b must be finite".into()));
        }
        let mut s = Matrix4::zeros();
        s.fixed_view_mut::<3, 3>(0, 0).copy_from(&sigma);
        s[(3, 3)] = 1.0;
        Ok(Self { sigma, beta0, b, s })
    }

    /// The model with unit diagonal and 0.1 off-diagonal covariance.
    pub fn example() -> Self {
        let sigma = Matrix3::new(1.0, 0.1, 0.1, 0.1, 1.0, 0.1, 0.1, 0.1, 1.0);
        Self::new(sigma, Vector2::new(1.0, 2.0), 0.0).expect("valid example")
    }

    pub fn covariance(&self) -> &Matrix4<f64> {
        &self.s
    }

    pub fn a(&self, theta: &[f64]) -> Vector4<f64> {
        Vector4::new(self.beta0[0] - theta[0], self.beta0[1] - theta[1], 0.0, 1.0)
    }

    pub fn c(&self, gamma: &[f64]) -> Vector4<f64> {
        Vector4::new(self.beta0[0] - gamma[0], self.beta0[1], -gamma[1], 1.0)
    }

    /// `(A, B)` of the determinant quadratic.
    fn quadratic(&self, theta: &[f64], gamma: &[f64]) -> (f64, f64) {
        let (a, c) = (self.a(theta), self.c(gamma));
        let saa = a.dot(&(self.s * a));
        let scc = c.dot(&(self.s * c));
        let sac = a.dot(&(self.s * c));
        (sac * sac - saa * scc, scc - saa)
    }

    /// `Λ(λ) = log E exp(λ l)`; `+∞` outside the finiteness domain.
    pub fn log_mgf(&self, theta: &[f64], gamma: &[f64], lambda: f64) -> f64 {
        let (a, b) = self.quadratic(theta, gamma);
        self.log_mgf_ab(a, b, lambda)
    }

    fn log_mgf_ab(&self, qa: f64, qb: f64, lambda: f64) -> f64 {
        let det = 1.0 + lambda * qb + lambda * lambda * qa;
        if det <= 0.0 || !self.in_domain(qa, qb, lambda) {
            return f64::INFINITY;
        }
        -0.5 * det.ln() - lambda * self.b
    }

    /// `λ` lies in the connected interval around 0 where the determinant
    /// stays positive.
    fn in_domain(&self, qa: f64, qb: f64, lambda: f64) -> bool {
        let (lo, hi) = domain(qa, qb);
        lambda > lo && lambda < hi
    }

    /// `inf_{λ≥0} Λ(λ)` and the minimizer.
    pub fn inner(&self, theta: &[f64], gamma: &[f64]) -> Result<(f64, f64)> {
        let (qa, qb) = self.quadratic(theta, gamma);
        let deriv = |l: f64| -0.5 * (qb + 2.0 * qa * l) / (1.0 + qb * l + qa * l * l) - self.b;
        let d0 = deriv(0.0);
        if d0 >= 0.0 {
            return Ok((0.0, 0.0));
        }
        let (_, hi) = domain(qa, qb);
        let lambda = if hi.is_finite() {
            // Λ' → +∞ at the edge of the domain
            let mut right = hi * (1.0 - 1e-12);
            let mut fr = deriv(right);
            let mut k = 0;
            while !(fr > 0.0) && k < 60 {
                right = hi - (hi - right) * 0.5;
                fr = deriv(right);
                k += 1;
            }
            if !(fr > 0.0) {
                return Err(Error::Numeric("could not bracket the λ root".into()));
            }
            brent_root(|l| Ok(deriv(l)), 0.0, right, d0, fr, 1e-14, 300)?
        } else {
            let mut lo = 0.0;
            let mut flo = d0;
            let mut right = 1.0;
            let mut fr = deriv(right);
            let mut k = 0;
            while fr < 0.0 {
                lo = right;
                flo = fr;
                right *= 2.0;
                fr = deriv(right);
                k += 1;
                if k > 80 {
                    return Err(Error::Divergence {
                        tail: Tail::Upper,
                        context: "one-sided drift: Λ' < 0 for all λ ≥ 0".into(),
                    });
                }
            }
            brent_root(|l| Ok(deriv(l)), lo, right, flo, fr, 1e-14, 300)?
        };
        Ok((self.log_mgf_ab(qa, qb, lambda), lambda))
    }

    fn boxes(&self, config: &JointConfig) -> (SearchSpace, SearchSpace) {
        let h = config.half_width;
        let t = SearchSpace::linear(
            &[self.beta0[0] - h, self.beta0[1] - h],
            &[self.beta0[0] + h, self.beta0[1] + h],
        );
        let g = SearchSpace::linear(&[self.beta0[0] - h, -h], &[self.beta0[0] + h, h]);
        (t, g)
    }

    fn middle(&self, theta: &[f64], gspace: &SearchSpace, config: &JointConfig) -> (f64, Vec<f64>) {
        let obj = |g: &[f64]| -> f64 { self.inner(theta, g).map_or(f64::INFINITY, |r| -r.0) };
        let mut cells: Vec<(Vec<f64>, f64)> = gspace
            .grid_points(config.grid)
            .into_iter()
            .map(|u| {
                let v = obj(&u);
                (u, v)
            })
            .collect();
        cells.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| lex_cmp(&a.0, &b.0)));
        let opts = tight_simplex();
        let mut best = cells[0].clone();
        for (u0, _) in cells.iter().take(config.starts.max(1)) {
            let r = nelder_mead(&obj, u0, gspace, &opts);
            let r = nelder_mead(&obj, &r.x, gspace, &opts);
            if r.fx < best.1 || (r.fx == best.1 && lex_cmp(&r.x, &best.0).is_lt()) {
                best = (r.x, r.fx);
            }
        }
        (-best.1, best.0)
    }

    /// `ρ† = −log inf_θ sup_γ inf_{λ≥0} E exp(λ l)`.
    pub fn rate(&self, config: &JointConfig) -> Result<JointRate> {
        let (tspace, gspace) = self.boxes(config);
        let outer = |t: &[f64]| -> f64 { self.middle(t, &gspace, config).0 };
        let mut cells: Vec<(Vec<f64>, f64)> = tspace
            .grid_points(config.grid)
            .into_iter()
            .map(|u| {
                let v = outer(&u);
                (u, v)
            })
            .collect();
        cells.retain(|c| c.1.is_finite());
        if cells.is_empty() {
            return Err(Error::Numeric("inner problem not finite on the θ grid".into()));
        }
        cells.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| lex_cmp(&a.0, &b.0)));
        let opts = tight_simplex();
        let mut best = cells[0].clone();
        for (u0, _) in cells.iter().take(config.starts.max(1)) {
            let r = nelder_mead(&outer, u0, &tspace, &opts);
            let r = nelder_mead(&outer, &r.x, &tspace, &opts);
            if r.fx < best.1 || (r.fx == best.1 && lex_cmp(&r.x, &best.0).is_lt()) {
                best = (r.x, r.fx);
            }
        }
        let theta = best.0;
        let (_, gamma) = self.middle(&theta, &gspace, config);
        let (log_m, lambda) = self.inner(&theta, &gamma)?;
        Ok(JointRate {
            rho: (-log_m).max(0.0),
            theta_dag: theta,
            gamma_dag: gamma,
            lambda_dag: lambda,
            log_m_dag: log_m,
            b: self.b,
        })
    }

    /// Covariance of `w` under the tilt at `(θ, γ, λ)`:
    /// `(S⁻¹ − λ(aaᵀ − ccᵀ))⁻¹`.
    pub fn tilted_covariance(&self, theta: &[f64], gamma: &[f64], lambda: f64) -> Result<Matrix4<f64>> {
        let (a, c) = (self.a(theta), self.c(gamma));
        let s_inv = self.s.try_inverse().ok_or_else(|| Error::Numeric("singular covariance".into()))?;
        let prec = s_inv - (a * a.transpose() - c * c.transpose()) * lambda;
        let ch = Cholesky::new(prec).ok_or_else(|| Error::Divergence {
            tail: Tail::Upper,
            context: format!("tilted precision is not positive definite at λ = {lambda}"),
        })?;
        Ok(ch.inverse())
    }

    /// Expected θ-scores and γ-scores under the tilt at the saddle.
    pub fn expected_scores(&self, saddle: &JointRate) -> Result<([f64; 2], [f64; 2])> {
        let sq = self.tilted_covariance(&saddle.theta_dag, &saddle.gamma_dag, saddle.lambda_dag)?;
        let ta = sq * self.a(&saddle.theta_dag);
        let tc = sq * self.c(&saddle.gamma_dag);
        Ok(([ta[0], ta[1]], [tc[0], tc[2]]))
    }

    /// First-order conditions at the saddle: expected scores under the tilt
    /// vanish in the interior of the search boxes and point outward at faces.
    pub fn euler_check(&self, saddle: &JointRate, config: &JointConfig) -> Result<EulerReport> {
        let (ts, gs) = self.expected_scores(saddle)?;
        let (tspace, gspace) = self.boxes(config);
        let mut conditions = Vec::new();
        for (block, point, scores, space) in [
            ("theta", &saddle.theta_dag, ts, &tspace),
            ("gamma", &saddle.gamma_dag, gs, &gspace),
        ] {
            for (index, (&v, axis)) in point.iter().zip(&space.axes).enumerate() {
                let width = axis.hi - axis.lo;
                let score = scores[index];
                let (placement, inward) = if v - axis.lo <= FACE_TOL * width {
                    (Placement::LowerFace, score)
                } else if axis.hi - v <= FACE_TOL * width {
                    (Placement::UpperFace, -score)
                } else {
                    (Placement::Interior, score)
                };
                let passed = match placement {
                    Placement::Interior => score.abs() <= EULER_TOL,
                    _ => inward <= EULER_TOL,
                };
                conditions.push(EulerCondition {
                    block,
                    index,
                    placement,
                    expected_score: score,
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

    /// Per-observation log-ratio `l` at an observation `(x₁, x₂, z₁, y)`.
    pub fn log_ratio(&self, theta: &[f64], gamma: &[f64], obs: &[f64; 4]) -> f64 {
        let [x1, x2, z1, y] = *obs;
        let rg = y - theta[0] * x1 - theta[1] * x2;
        let rh = y - gamma[0] * x1 - gamma[1] * z1;
        0.5 * rg * rg - 0.5 * rh * rh - self.b
    }

    /// Maps `w = (x₁, x₂, z₁, ε)` to the observation `(x₁, x₂, z₁, y)`.
    pub fn observation(&self, w: &Vector4<f64>) -> [f64; 4] {
        [w[0], w[1], w[2], self.beta0[0] * w[0] + self.beta0[1] * w[1] + w[3]]
    }
}

/// Relative distance to a search-box face below which a coordinate is on it.
const FACE_TOL: f64 = 1e-6;

fn tight_simplex() -> NelderMeadOptions {
    NelderMeadOptions {
        max_iter: 2000,
        xtol: 1e-11,
        ftol: 1e-15,
        initial_step: 0.02,
    }
}

/// Interval around 0 where `1 + Bλ + Aλ²` is positive.
fn domain(qa: f64, qb: f64) -> (f64, f64) {
    if qa == 0.0 {
        return if qb > 0.0 {
            (-1.0 / qb, f64::INFINITY)
        } else if qb < 0.0 {
            (f64::NEG_INFINITY, -1.0 / qb)
        } else {
            (f64::NEG_INFINITY, f64::INFINITY)
        };
    }
    let disc = qb * qb - 4.0 * qa;
    if disc < 0.0 {
        // A > 0 with no real roots: positive everywhere
        return (f64::NEG_INFINITY, f64::INFINITY);
    }
    let sq = disc.sqrt();
    // numerically stable roots of Aλ² + Bλ + 1
    let q = -0.5 * (qb + qb.signum() * sq);
    let (r1, r2) = if q != 0.0 { (q / qa, 1.0 / q) } else { (-sq / (2.0 * qa), sq / (2.0 * qa)) };
    let (lo_root, hi_root) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
    if qa < 0.0 {
        (lo_root, hi_root)
    } else if lo_root > 0.0 {
        (f64::NEG_INFINITY, lo_root)
    } else {
        (hi_root, f64::INFINITY)
    }
}

/// `ρ†` for the random-design Gaussian model with covariance `Σ` of
/// `(X₁, X₂, Z₁)`, truth `β⁰` and drift `b`.
pub fn gaussian_joint_rate(sigma: Matrix3<f64>, beta0: Vector2<f64>, b: f64) -> Result<JointRate> {
    GaussianJoint::new(sigma, beta0, b)?.rate(&JointConfig::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_row(c: f64) -> GlmDesign {
        let _ = c;
        GlmDesign::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 0.0),
            Cumulant::Gaussian,
        )
        .unwrap()
    }

    #[test]
    fn single_row_gaussian_closed_form() {
        let d = single_row(1.5);
        let c = 1.5;
        for l in [0.0, 0.2, 0.5, 0.9] {
            let v = rho_tilde(&d, &[0.0], &[c], l).unwrap();
            assert!((v - (l * c * c / 2.0 - l * l * c * c / 2.0)).abs() < 1e-14);
        }
        assert!(rho_tilde_dlambda(&d, &[0.0], &[c], 0.5).unwrap().abs() < 1e-14);
        let (v, l) = sup_lambda(&d, &[0.0], &[c]).unwrap();
        assert!((v - c * c / 8.0).abs() < 1e-12 && (l - 0.5).abs() < 1e-10);
    }

    #[test]
    fn cumulants_are_consistent() {
        for c in [Cumulant::Gaussian, Cumulant::Poisson, Cumulant::Bernoulli] {
            for u in [-3.0, -0.2, 0.0, 1.1, 4.0] {
                let h = 1e-6;
                assert!(((c.b(u + h) - c.b(u - h)) / (2.0 * h) - c.b1(u)).abs() < 1e-7);
                assert!(((c.b1(u + h) - c.b1(u - h)) / (2.0 * h) - c.b2(u)).abs() < 1e-7);
            }
        }
        assert!((Cumulant::Bernoulli.b(800.0) - 800.0).abs() < 1e-12);
    }

    #[test]
    fn beta0_is_in_bn() {
        let d = GlmDesign::new(
            DMatrix::from_row_slice(3, 1, &[1.0, 2.0, -1.0]),
            DMatrix::from_row_slice(3, 1, &[0.5, 1.0, 1.0]),
            DVector::from_element(1, 0.7),
            Cumulant::Poisson,
        )
        .unwrap();
        assert!(in_bn(&d, &[0.7]).unwrap());
        assert!(!in_bn(&d, &[4.0]).unwrap());
    }

    #[test]
    fn csv_loader_splits_blocks() {
        let text = "x1,x2,z1\n1,0,2\n0,1,3\n1,1,1\n";
        let d = GlmDesign::from_csv_reader(text.as_bytes(), DVector::from_vec(vec![1.0, 2.0]), Cumulant::Gaussian).unwrap();
        assert_eq!(d.x.ncols(), 2);
        assert_eq!(d.z.ncols(), 1);
        assert_eq!(d.z[(1, 0)], 3.0);
        let bad = "x1,w\n1,2\n";
        assert!(GlmDesign::from_csv_reader(bad.as_bytes(), DVector::from_vec(vec![1.0]), Cumulant::Gaussian).is_err());
    }

    #[test]
    fn joint_domain_and_mgf() {
        let m = GaussianJoint::example();
        let theta = [1.0, 1.5];
        let gamma = [1.0, 0.5];
        assert_eq!(m.log_mgf(&theta, &gamma, 0.0), 0.0);
        let (qa, qb) = m.quadratic(&theta, &gamma);
        let (lo, hi) = domain(qa, qb);
        assert!(lo < 0.0 && hi > 0.0);
        assert!(m.log_mgf(&theta, &gamma, hi * 1.01).is_infinite());
    }
}
