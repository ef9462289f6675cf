//! Rate functions and Chernoff indices.
//!
//! The pairwise index is `ρ = max_{z∈(0,1)} −Λ(z)` for the pairwise log-MGF
//! `Λ(z) = log ∫ g_θ^{1−z} h_γ^z`. The generalized index minimizes it over
//! both parameter boxes.

use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::families::{check_separation, FamilyModel, ParamBox, SeparationReport, NEAR_BOUND_FRACTION};
use crate::mgf::{self, LogMgfSpec};
use crate::optim::{brent_minimize, brent_root, lex_cmp, nelder_mead, NelderMeadOptions, SearchSpace};
use crate::output;

/// Interior of the z-search interval.
pub const Z_EDGE: f64 = 1e-6;
const Z_TOL: f64 = 1e-10;
/// Bracket expansion stops after this many doublings of the step.
const MAX_DOUBLINGS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub grid_resolution: usize,
    /// Total simplex iterations spent in local refinement.
    pub refinement_steps: usize,
    pub quadrature_tol: f64,
    /// Set when the optimizer ended within 5% of an artificial box face.
    pub boundary_flag: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub separation: Option<SeparationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChernoffResult {
    pub rho: f64,
    pub z_star: f64,
    pub theta_star: Vec<f64>,
    pub gamma_star: Vec<f64>,
    pub diagnostics: Diagnostics,
}

/// Settings for [`generalized_index`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    /// Grid points per free parameter axis.
    pub grid_resolution: usize,
    /// Number of best grid cells used to start simplex refinement.
    pub refine_starts: usize,
    pub max_iter: usize,
    pub xtol: f64,
    /// Run the separation check first and attach its report.
    pub check_separation: bool,
    pub separation_resolution: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            grid_resolution: 41,
            refine_starts: 5,
            max_iter: 600,
            xtol: 1e-7,
            check_separation: true,
            separation_resolution: 9,
        }
    }
}

impl IndexConfig {
    fn nelder_mead(&self) -> NelderMeadOptions {
        NelderMeadOptions {
            max_iter: self.max_iter,
            xtol: self.xtol,
            ..Default::default()
        }
    }
}

/// Legendre transform `m(t) = sup_z [z t − Λ(z)]` of a pairwise log-MGF.
pub fn rate_function(spec: &LogMgfSpec, t: f64) -> Result<f64> {
    if !spec.is_pairwise() {
        return Err(Error::Config("rate_function needs a pairwise spec (θ₀ = θ, b = 0)".into()));
    }
    if !t.is_finite() {
        return Err(Error::Config(format!("t must be finite, got {t}")));
    }
    let at0 = mgf::evaluate(spec, 0.0)?;
    let mean = at0.d1;
    if t == mean || at0.d2 == 0.0 {
        if t == mean {
            return Ok(0.0);
        }
        return Err(Error::Range { t, lo: mean, hi: mean });
    }
    let dir = if t > mean { 1.0 } else { -1.0 };
    let (a, fa, b, fb) = match bracket_derivative(spec, t, dir, mean - t)? {
        Some(br) => br,
        None => {
            let (lo, hi) = attainable_interval(spec)?;
            return Err(Error::Range { t, lo, hi });
        }
    };
    let z = brent_root(|z| Ok(mgf::evaluate(spec, z)?.d1 - t), a, b, fa, fb, 1e-12, 200)?;
    let value = z * t - mgf::log_mgf(spec, z)?;
    Ok(value.max(0.0))
}

/// Searches along `dir` from 0 for a bracket of `Λ'(z) = t`. `None` when the
/// finiteness domain ends (or the search gives up) before `Λ'` reaches `t`.
pub(crate) fn bracket_derivative(spec: &LogMgfSpec, t: f64, dir: f64, f0: f64) -> Result<Option<(f64, f64, f64, f64)>> {
    let mut z_prev = 0.0;
    let mut f_prev = f0;
    let mut step = 0.5;
    for _ in 0..MAX_DOUBLINGS {
        let z = dir * step;
        match mgf::evaluate(spec, z) {
            Ok(v) => {
                let f = v.d1 - t;
                if f.signum() != f_prev.signum() || f == 0.0 {
                    return Ok(Some((z_prev, f_prev, z, f)));
                }
                z_prev = z;
                f_prev = f;
                step *= 2.0;
            }
            Err(Error::Divergence { .. }) => {
                // bisect towards the edge of the finiteness domain
                let mut bad = z;
                for _ in 0..60 {
                    let mid = 0.5 * (z_prev + bad);
                    match mgf::evaluate(spec, mid) {
                        Ok(v) => {
                            let f = v.d1 - t;
                            if f.signum() != f_prev.signum() || f == 0.0 {
                                return Ok(Some((z_prev, f_prev, mid, f)));
                            }
                            z_prev = mid;
                            f_prev = f;
                        }
                        Err(Error::Divergence { .. }) => bad = mid,
                        Err(e) => return Err(e),
                    }
                }
                return Ok(None);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

/// Approximate closure of the range of `Λ'` over the finiteness domain.
fn attainable_interval(spec: &LogMgfSpec) -> Result<(f64, f64)> {
    let edge = |dir: f64| -> Result<f64> {
        let mut good = 0.0;
        let mut best = mgf::evaluate(spec, 0.0)?.d1;
        let mut step = 0.5;
        for _ in 0..MAX_DOUBLINGS {
            match mgf::evaluate(spec, dir * step) {
                Ok(v) => {
                    good = dir * step;
                    best = v.d1;
                    step *= 2.0;
                }
                Err(Error::Divergence { .. }) => {
                    let mut bad = dir * step;
                    for _ in 0..60 {
                        let mid = 0.5 * (good + bad);
                        match mgf::evaluate(spec, mid) {
                            Ok(v) => {
                                good = mid;
                                best = v.d1;
                            }
                            Err(Error::Divergence { .. }) => bad = mid,
                            Err(e) => return Err(e),
                        }
                    }
                    return Ok(best);
                }
                Err(e) => return Err(e),
            }
        }
        // finite everywhere probed: report the last value reached
        Ok(best)
    };
    Ok((edge(-1.0)?, edge(1.0)?))
}

/// `max_{z∈[ε,1−ε]} −Λ(z)` for one spec; returns `(ρ, z*)`.
fn chernoff_z(spec: &LogMgfSpec) -> Result<(f64, f64)> {
    let mut failure = None;
    let (z, fz) = brent_minimize(
        |z| match mgf::log_mgf(spec, z) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::INFINITY
            }
        },
        Z_EDGE,
        1.0 - Z_EDGE,
        Z_TOL,
        200,
    );
    if let Some(e) = failure {
        return Err(Error::Numeric(format!(
            "log-MGF not finite inside (0, 1); the families are not mutually absolutely continuous ({e})"
        )));
    }
    Ok(((-fz).max(0.0), z))
}

fn rho_at(gfam: &FamilyModel, theta: &[f64], hfam: &FamilyModel, gamma: &[f64]) -> Result<(f64, f64)> {
    chernoff_z(&LogMgfSpec::pairwise(gfam, theta, hfam, gamma)?)
}

/// Pairwise Chernoff index between `g_θ` and `h_γ`.
pub fn pairwise_index(gfam: &FamilyModel, theta: &[f64], hfam: &FamilyModel, gamma: &[f64]) -> Result<ChernoffResult> {
    let (rho, z_star) = rho_at(gfam, theta, hfam, gamma)?;
    Ok(ChernoffResult {
        rho,
        z_star,
        theta_star: theta.to_vec(),
        gamma_star: gamma.to_vec(),
        diagnostics: Diagnostics {
            grid_resolution: 0,
            refinement_steps: 0,
            quadrature_tol: mgf::QUAD_TOL,
            boundary_flag: false,
            separation: None,
        },
    })
}

/// Generalized Chernoff index `min_{θ∈Θ, γ∈Γ} ρ_{θγ}`: grid scan, then
/// simplex refinement from the best cells.
pub fn generalized_index(
    gfam: &FamilyModel,
    hfam: &FamilyModel,
    theta_box: &ParamBox,
    gamma_box: &ParamBox,
    config: &IndexConfig,
) -> Result<ChernoffResult> {
    let gfam = gfam.with_space(theta_box.clone())?;
    let hfam = hfam.with_space(gamma_box.clone())?;
    if gfam.support() != hfam.support() {
        return Err(Error::Config(format!(
            "`{}` and `{}` have different supports",
            gfam.id(),
            hfam.id()
        )));
    }
    let separation = if config.check_separation {
        let report = check_separation(&gfam, &hfam, config.separation_resolution)?;
        if !report.separated {
            warn!(
                "families `{}` and `{}` are not separated on these boxes (min KL {:.3e} at θ={:?}, γ={:?})",
                gfam.id(),
                hfam.id(),
                report.min_kl,
                report.theta,
                report.gamma
            );
        }
        Some(report)
    } else {
        None
    };

    let space = SearchSpace::joint(theta_box, gamma_box);
    let dg = theta_box.dim();
    let objective = |u: &[f64]| -> f64 {
        let p = space.to_param(u);
        rho_at(&gfam, &p[..dg], &hfam, &p[dg..]).map_or(f64::INFINITY, |r| r.0)
    };

    let grid = space.grid_points(config.grid_resolution);
    let mut cells: Vec<(Vec<f64>, f64)> = grid
        .into_par_iter()
        .map(|u| {
            let f = objective(&u);
            (u, f)
        })
        .collect();
    cells.retain(|c| c.1.is_finite());
    if cells.is_empty() {
        return Err(Error::Numeric("Chernoff index not finite at any grid cell".into()));
    }
    cells.sort_by(|a, b| {
        a.1.total_cmp(&b.1)
            .then_with(|| lex_cmp(&space.to_param(&a.0), &space.to_param(&b.0)))
    });
    let grid_best = cells[0].clone();

    let opts = config.nelder_mead();
    let starts: Vec<Vec<f64>> = cells.iter().take(config.refine_starts.max(1)).map(|c| c.0.clone()).collect();
    let runs: Vec<_> = if space.free_axes() == 0 {
        Vec::new()
    } else {
        starts.par_iter().map(|u0| nelder_mead(&objective, u0, &space, &opts)).collect()
    };
    let refinement_steps = runs.iter().map(|r| r.iterations).sum();
    let mut candidates: Vec<(Vec<f64>, f64)> = runs
        .iter()
        .filter(|r| r.converged && r.fx.is_finite())
        .map(|r| (r.x.clone(), r.fx))
        .collect();
    if !runs.is_empty() && candidates.is_empty() {
        let p = space.to_param(&grid_best.0);
        return Err(Error::Optimization {
            reason: format!("none of {} simplex refinements converged", runs.len()),
            incumbent: Some((p, grid_best.1)),
        });
    }
    candidates.push(grid_best);
    let best = candidates
        .into_iter()
        .map(|(u, f)| (space.to_param(&u), f))
        .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| lex_cmp(&a.0, &b.0)))
        .expect("at least one candidate");

    let (theta, gamma) = best.0.split_at(dg);
    let (rho, z_star) = rho_at(&gfam, theta, &hfam, gamma)?;
    let boundary_flag = theta_box.near_artificial_face(theta, NEAR_BOUND_FRACTION)
        || gamma_box.near_artificial_face(gamma, NEAR_BOUND_FRACTION);
    if boundary_flag {
        warn!(
            "least favorable pair θ={theta:?}, γ={gamma:?} is within {}% of a truncated box face; \
             the index may depend on the truncation",
            NEAR_BOUND_FRACTION * 100.0
        );
    }
    Ok(ChernoffResult {
        rho,
        z_star,
        theta_star: theta.to_vec(),
        gamma_star: gamma.to_vec(),
        diagnostics: Diagnostics {
            grid_resolution: config.grid_resolution,
            refinement_steps,
            quadrature_tol: mgf::QUAD_TOL,
            boundary_flag,
            separation,
        },
    })
}

/// Pairwise indices on a product grid of scalar parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateGrid {
    pub theta_axis: Vec<f64>,
    pub gamma_axis: Vec<f64>,
    /// `rho_values[i][j]` is the index at `(theta_axis[i], gamma_axis[j])`;
    /// `None` marks a cell whose evaluation failed.
    pub rho_values: Vec<Vec<Option<f64>>>,
}

impl RateGrid {
    /// Smallest finite cell value with its indices.
    pub fn min(&self) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for (i, row) in self.rho_values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if let Some(v) = *v {
                    if best.is_none_or(|b| v < b.2) {
                        best = Some((i, j, v));
                    }
                }
            }
        }
        best
    }

    /// CSV with the gamma axis as header row and theta as first column;
    /// failed cells are written as `NaN`.
    pub fn write_csv<W: Write>(&self, out: W, raw: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["theta\\gamma".to_string()];
        header.extend(self.gamma_axis.iter().map(|g| output::number(*g, raw)));
        w.write_record(&header)?;
        for (theta, row) in self.theta_axis.iter().zip(&self.rho_values) {
            let mut rec = vec![output::number(*theta, raw)];
            rec.extend(row.iter().map(|v| output::number(v.unwrap_or(f64::NAN), raw)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Pairwise index at every `(θ, γ)` node; rows follow `theta_axis`.
pub fn contour_grid(gfam: &FamilyModel, hfam: &FamilyModel, theta_axis: &[f64], gamma_axis: &[f64]) -> Result<RateGrid> {
    if gfam.family.dim() != 1 || hfam.family.dim() != 1 {
        return Err(Error::Dimension("contour grids need one-parameter families".into()));
    }
    if theta_axis.is_empty() || gamma_axis.is_empty() {
        return Err(Error::Config("contour axes must be nonempty".into()));
    }
    for &t in theta_axis {
        gfam.check_params(&[t])?;
    }
    for &g in gamma_axis {
        hfam.check_params(&[g])?;
    }
    let rho_values = theta_axis
        .par_iter()
        .map(|&t| {
            gamma_axis
                .iter()
                .map(|&g| match rho_at(gfam, &[t], hfam, &[g]) {
                    Ok((rho, _)) => Some(rho),
                    Err(e) => {
                        warn!("contour cell θ={t}, γ={g} failed: {e}");
                        None
                    }
                })
                .collect()
        })
        .collect();
    Ok(RateGrid {
        theta_axis: theta_axis.to_vec(),
        gamma_axis: gamma_axis.to_vec(),
        rho_values,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PairRate {
    pub i: usize,
    pub j: usize,
    pub result: ChernoffResult,
}

#[derive(Debug, Clone, Serialize)]
pub struct MultiFamilyRate {
    pub rho: f64,
    /// Zero-based indices of the pair attaining the minimum.
    pub worst_pair: (usize, usize),
    pub pairs: Vec<PairRate>,
}

/// Smallest generalized index over all unordered pairs of families, each
/// restricted to its own box.
pub fn multi_family_rate(families: &[FamilyModel], config: &IndexConfig) -> Result<MultiFamilyRate> {
    if families.len() < 2 {
        return Err(Error::Config("multi-family rate needs at least two families".into()));
    }
    let mut pairs = Vec::new();
    for i in 0..families.len() {
        for j in i + 1..families.len() {
            let (a, b) = (&families[i], &families[j]);
            let result = generalized_index(a, b, &a.space, &b.space, config).map_err(|e| Error::Pair {
                i,
                j,
                source: Box::new(e),
            })?;
            pairs.push(PairRate { i, j, result });
        }
    }
    let worst = pairs
        .iter()
        .min_by(|a, b| a.result.rho.total_cmp(&b.result.rho))
        .expect("at least one pair");
    Ok(MultiFamilyRate {
        rho: worst.result.rho,
        worst_pair: (worst.i, worst.j),
        pairs,
    })
}
