//! Samplers for densities known only up to a constant.
//!
//! Continuous supports use a tabulated inverse CDF on the same mapped
//! coordinate as the quadrature layer; lattice supports use an alias table
//! on the support truncated where the remaining mass is negligible.

use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;

use crate::error::{Error, Result};
use crate::families::Support;
use crate::quad::{self, CoordMap};
use crate::rng::open01;

/// Per-panel tolerance on the interpolated mass, relative to the total.
const PANEL_TOL: f64 = 1e-13;
const INITIAL_WIDTH: f64 = 0.25;
const MAX_DEPTH: u32 = 40;

/// Gauss–Legendre 5-point nodes and weights on [-1, 1].
const GL5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
    (0.906_179_845_938_664, 0.236_926_885_056_189_1),
];

/// Inverse-CDF table: the density on the mapped coordinate is interpolated
/// by a quadratic on each panel, and panels are refined until the
/// interpolant's mass agrees with Gauss–Legendre.
#[derive(Debug, Clone)]
pub struct InverseCdfTable {
    map: CoordMap,
    /// Panel left ends, plus the right end of the last panel.
    nodes: Vec<f64>,
    /// Normalized CDF at `nodes`.
    cdf: Vec<f64>,
    /// Normalized density at left end, midpoint and right end of each panel.
    dens: Vec<[f64; 3]>,
}

impl InverseCdfTable {
    pub fn new<F: Fn(f64) -> f64>(lo: f64, hi: f64, log_density: F) -> Result<Self> {
        let map = CoordMap::for_interval(lo, hi);
        let range = quad::locate_range(map, &log_density)?;
        let shift = range.log_max;
        let f = |u: f64| -> f64 {
            let v = log_density(map.x(u)) + map.log_jacobian(u) - shift;
            if v.is_nan() {
                0.0
            } else {
                v.exp()
            }
        };
        let count = (((range.hi - range.lo) / INITIAL_WIDTH).ceil() as usize).max(4);
        let width = (range.hi - range.lo) / count as f64;
        let coarse: f64 = (0..count)
            .map(|i| gauss5(&f, range.lo + i as f64 * width, range.lo + (i + 1) as f64 * width))
            .sum();
        if !(coarse > 0.0) || !coarse.is_finite() {
            return Err(Error::Numeric("density has no mass to tabulate".into()));
        }
        let tol = PANEL_TOL * coarse;
        let mut nodes = Vec::new();
        let mut dens = Vec::new();
        let mut masses = Vec::new();
        for i in 0..count {
            let a = range.lo + i as f64 * width;
            let b = if i + 1 == count { range.hi } else { a + width };
            refine(&f, a, b, f(a), f(b), tol, 0, &mut nodes, &mut dens, &mut masses);
        }
        nodes.push(range.hi);
        let total: f64 = masses.iter().sum();
        let mut cdf = Vec::with_capacity(nodes.len());
        let mut acc = 0.0;
        cdf.push(0.0);
        for m in &masses {
            acc += m;
            cdf.push(acc / total);
        }
        for d in &mut dens {
            for v in d.iter_mut() {
                *v /= total;
            }
        }
        Ok(Self { map, nodes, cdf, dens })
    }

    pub fn panels(&self) -> usize {
        self.dens.len()
    }

    /// Interpolated CDF at `x`.
    pub fn cdf(&self, x: f64) -> f64 {
        let u = self.map.u(x);
        if u <= self.nodes[0] {
            return 0.0;
        }
        if u >= *self.nodes.last().expect("nonempty") {
            return 1.0;
        }
        let i = self.nodes.partition_point(|&n| n <= u) - 1;
        let h = self.nodes[i + 1] - self.nodes[i];
        self.cdf[i] + h * partial_mass(&self.dens[i], (u - self.nodes[i]) / h)
    }

    /// Inverse of [`cdf`](Self::cdf) at probability `p`.
    pub fn quantile(&self, p: f64) -> f64 {
        let last = self.dens.len() - 1;
        let i = (self.cdf.partition_point(|&c| c <= p)).saturating_sub(1).min(last);
        let (a, b) = (self.nodes[i], self.nodes[i + 1]);
        let h = b - a;
        let target = ((p - self.cdf[i]) / h).max(0.0);
        let d = &self.dens[i];
        let mass = partial_mass(d, 1.0);
        let mut lo = 0.0;
        let mut hi = 1.0;
        let mut t = if mass > 0.0 { (target / mass).clamp(0.0, 1.0) } else { 0.5 };
        for _ in 0..60 {
            let g = partial_mass(d, t) - target;
            if g.abs() <= 1e-16 * target {
                break;
            }
            if g > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let q = quad_density(d, t);
            let next = if q > 0.0 { t - g / q } else { f64::NAN };
            t = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
            if hi - lo < 1e-15 {
                break;
            }
        }
        self.map.x(a + t * h)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.quantile(open01(rng))
    }
}

fn gauss5<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let c = 0.5 * (a + b);
    let r = 0.5 * (b - a);
    r * GL5.iter().map(|&(x, w)| w * f(c + r * x)).sum::<f64>()
}

#[allow(clippy::too_many_arguments)]
fn refine<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fb: f64,
    tol: f64,
    depth: u32,
    nodes: &mut Vec<f64>,
    dens: &mut Vec<[f64; 3]>,
    masses: &mut Vec<f64>,
) {
    let m = 0.5 * (a + b);
    let fm = f(m);
    let simpson = (b - a) * (fa + 4.0 * fm + fb) / 6.0;
    let reference = gauss5(f, a, b);
    if (simpson - reference).abs() <= tol || depth >= MAX_DEPTH {
        nodes.push(a);
        dens.push([fa, fm, fb]);
        masses.push(simpson.max(0.0));
        return;
    }
    refine(f, a, m, fa, fm, tol, depth + 1, nodes, dens, masses);
    refine(f, m, b, fm, fb, tol, depth + 1, nodes, dens, masses);
}

/// Quadratic through `(0, d0)`, `(½, d1)`, `(1, d2)` evaluated at `t`.
fn quad_density(d: &[f64; 3], t: f64) -> f64 {
    let [f0, f1, f2] = *d;
    f0 + (-3.0 * f0 + 4.0 * f1 - f2) * t + (2.0 * f0 - 4.0 * f1 + 2.0 * f2) * t * t
}

/// `∫_0^t` of [`quad_density`].
fn partial_mass(d: &[f64; 3], t: f64) -> f64 {
    let [f0, f1, f2] = *d;
    t * (f0 + t * ((-3.0 * f0 + 4.0 * f1 - f2) / 2.0 + t * (2.0 * f0 - 4.0 * f1 + 2.0 * f2) / 3.0))
}

/// A sampler for an unnormalized one-dimensional density.
#[derive(Debug, Clone)]
pub enum DensitySampler {
    /// Exact normal draws.
    Normal { mean: f64, sd: f64 },
    Table(InverseCdfTable),
    /// Alias table over `{0, …, len − 1}`.
    Alias(WeightedAliasIndex<f64>),
}

impl DensitySampler {
    /// Tabulates `exp(log_density)` on `support`.
    pub fn tabulate<F: Fn(f64) -> f64>(support: &Support, log_density: F) -> Result<Self> {
        match *support {
            Support::Interval { lo, hi } => Ok(DensitySampler::Table(InverseCdfTable::new(lo, hi, log_density)?)),
            Support::Lattice { max } => {
                let r = quad::sum_lattice::<1, _, _>(max, |k| log_density(k as f64), |_| [1.0])?;
                let shift = r.shift;
                let weights: Vec<f64> = (0..r.evaluations)
                    .map(|k| {
                        let v = (log_density(k as f64) - shift).exp();
                        if v.is_nan() {
                            0.0
                        } else {
                            v
                        }
                    })
                    .collect();
                let index = WeightedAliasIndex::new(weights)
                    .map_err(|e| Error::Numeric(format!("alias table construction failed: {e}")))?;
                Ok(DensitySampler::Alias(index))
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            DensitySampler::Normal { mean, sd } => {
                let z: f64 = rand_distr::StandardNormal.sample(rng);
                mean + sd * z
            }
            DensitySampler::Table(t) => t.sample(rng),
            DensitySampler::Alias(a) => a.sample(rng) as f64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use statrs::distribution::{ContinuousCDF, Normal};

    #[test]
    fn table_cdf_matches_normal() {
        let t = InverseCdfTable::new(f64::NEG_INFINITY, f64::INFINITY, |x| -0.5 * (x - 1.0).powi(2)).unwrap();
        let n = Normal::new(1.0, 1.0).unwrap();
        for x in [-3.0, -0.5, 0.0, 1.0, 2.3, 5.0] {
            assert!((t.cdf(x) - n.cdf(x)).abs() < 1e-10, "x={x}");
        }
        for p in [1e-6, 0.1, 0.5, 0.9, 1.0 - 1e-6] {
            let q = t.quantile(p);
            assert!((n.cdf(q) - p).abs() < 1e-10, "p={p} q={q} cdf={} tab={}", n.cdf(q), t.cdf(q));
        }
    }

    #[test]
    fn table_on_half_line() {
        // Exp(1) on [0, ∞)
        let t = InverseCdfTable::new(0.0, f64::INFINITY, |x| -x).unwrap();
        for x in [1e-3, 0.5, 2.0, 10.0] {
            assert!((t.cdf(x) - (1.0 - (-x).exp())).abs() < 1e-10);
        }
        let mut rng = stream(3, 0);
        let m: f64 = (0..20000).map(|_| t.sample(&mut rng)).sum::<f64>() / 20000.0;
        assert!((m - 1.0).abs() < 4.0 / 20000f64.sqrt());
    }

    #[test]
    fn alias_on_lattice() {
        let s = DensitySampler::tabulate(&Support::Lattice { max: None }, |k| {
            -2.0 + k * 2f64.ln() - statrs::function::gamma::ln_gamma(k + 1.0)
        })
        .unwrap();
        let mut rng = stream(5, 1);
        let n = 50_000;
        let m: f64 = (0..n).map(|_| s.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((m - 2.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
    }
}
