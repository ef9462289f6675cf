//! Log-space integration of positive weights against a handful of statistics.
//!
//! Every expectation in this crate has the form `∫ e^{φ(x)} s_k(x) μ(dx)`,
//! where `φ` is a log-density (possibly tilted) whose values can span
//! hundreds of orders of magnitude. Integrals are therefore returned as a
//! log-scale `shift` plus scaled values: `∫ e^{φ} s_k = e^{shift} · value[k]`.
//!
//! Continuous supports are mapped to the real line (`x = lo + e^u` for a
//! half-line, `x = sinh u` for the whole line, a logistic map for finite
//! intervals), the effective range in `u` is located by scanning, and the
//! range is integrated with adaptive 15-point Gauss–Kronrod. Lattice
//! supports are summed term by term with a streaming log-sum-exp and
//! truncated once a geometric majorant of the tail is negligible.

use crate::error::{Error, Result, Tail};
use crate::families::Support;

/// Log-scale drop below the running maximum beyond which the integrand is
/// treated as negligible (e^-60 ~ 1e-26).
const NEGLIGIBLE_DROP: f64 = 60.0;
const SCAN_HALF_WIDTH: f64 = 40.0;
const SCAN_STEP: f64 = 0.25;
const MAX_ABS_U: f64 = 700.0;
const INITIAL_PANEL_WIDTH: f64 = 2.0;
const MAX_PANELS: usize = 4000;
const STAT_ABS_FLOOR: f64 = 1e-6;
const LATTICE_TAIL_TOL: f64 = 1e-16;
const LATTICE_MAX_TERMS: u64 = 20_000_000;
const LATTICE_DIVERGENCE_CHECK: u64 = 10_000;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Change of variables from `u ∈ R` onto a continuous support.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoordMap {
    /// `x = sinh(u)`
    Sinh,
    /// `x = lo + e^u`
    Lower(f64),
    /// `x = hi - e^u`
    Upper(f64),
    /// `x = lo + (hi - lo) / (1 + e^-u)`
    Logistic(f64, f64),
}

fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

impl CoordMap {
    pub fn for_interval(lo: f64, hi: f64) -> Self {
        match (lo.is_finite(), hi.is_finite()) {
            (false, false) => CoordMap::Sinh,
            (true, false) => CoordMap::Lower(lo),
            (false, true) => CoordMap::Upper(hi),
            (true, true) => CoordMap::Logistic(lo, hi),
        }
    }

    pub fn x(&self, u: f64) -> f64 {
        match *self {
            CoordMap::Sinh => u.sinh(),
            CoordMap::Lower(lo) => lo + u.exp(),
            CoordMap::Upper(hi) => hi - u.exp(),
            CoordMap::Logistic(lo, hi) => lo + (hi - lo) / (1.0 + (-u).exp()),
        }
    }

    /// Inverse of [`CoordMap::x`].
    pub fn u(&self, x: f64) -> f64 {
        match *self {
            CoordMap::Sinh => x.asinh(),
            CoordMap::Lower(lo) => (x - lo).ln(),
            CoordMap::Upper(hi) => (hi - x).ln(),
            CoordMap::Logistic(lo, hi) => {
                let p = (x - lo) / (hi - lo);
                (p / (1.0 - p)).ln()
            }
        }
    }

    /// `log |dx/du|`
    pub fn log_jacobian(&self, u: f64) -> f64 {
        match *self {
            CoordMap::Sinh => {
                let a = u.abs();
                a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
            }
            CoordMap::Lower(_) | CoordMap::Upper(_) => u,
            CoordMap::Logistic(lo, hi) => (hi - lo).ln() - softplus(-u) - softplus(u),
        }
    }
}

/// Running sum of `e^{logw} · s` in scaled form; rescales whenever a new
/// maximum weight arrives so no term overflows.
#[derive(Debug, Clone, Copy)]
pub struct ScaledAcc<const K: usize> {
    pub shift: f64,
    pub sums: [f64; K],
}

impl<const K: usize> Default for ScaledAcc<K> {
    fn default() -> Self {
        Self {
            shift: f64::NEG_INFINITY,
            sums: [0.0; K],
        }
    }
}

impl<const K: usize> ScaledAcc<K> {
    pub fn add(&mut self, logw: f64, stats: &[f64; K]) {
        if logw == f64::NEG_INFINITY || logw.is_nan() {
            return;
        }
        if logw > self.shift {
            let scale = (self.shift - logw).exp();
            for s in &mut self.sums {
                *s *= scale;
            }
            self.shift = logw;
        }
        let w = (logw - self.shift).exp();
        for (s, v) in self.sums.iter_mut().zip(stats) {
            *s += w * v;
        }
    }

    /// `log` of the `k`-th sum; only meaningful for positive sums.
    pub fn log_sum(&self, k: usize) -> f64 {
        self.shift + self.sums[k].ln()
    }
}

/// Result of a log-space integration: `∫ e^φ s_k = e^{shift} · values[k]`.
#[derive(Debug, Clone, Copy)]
pub struct ScaledIntegral<const K: usize> {
    pub shift: f64,
    pub values: [f64; K],
    /// Number of integrand evaluations (or lattice terms).
    pub evaluations: usize,
}

impl<const K: usize> ScaledIntegral<K> {
    pub fn log_value(&self, k: usize) -> f64 {
        self.shift + self.values[k].ln()
    }

    /// `∫ e^φ s_k / ∫ e^φ s_0`
    pub fn ratio(&self, k: usize) -> f64 {
        self.values[k] / self.values[0]
    }
}

/// Integrates `e^{φ(x)} s_k(x)` over `support`.
///
/// `log_weight` may return `-inf` where the weight vanishes. `stats` is
/// evaluated only where the weight is positive.
pub fn integrate<const K: usize, F, S>(
    support: &Support,
    log_weight: F,
    stats: S,
    rel_tol: f64,
) -> Result<ScaledIntegral<K>>
where
    F: Fn(f64) -> f64,
    S: Fn(f64) -> [f64; K],
{
    match *support {
        Support::Interval { lo, hi } => {
            let map = CoordMap::for_interval(lo, hi);
            integrate_mapped(map, &log_weight, &stats, rel_tol)
        }
        Support::Lattice { max } => {
            sum_lattice(max, |k| log_weight(k as f64), |k| stats(k as f64))
        }
    }
}

/// Effective integration range in the mapped coordinate.
#[derive(Debug, Clone, Copy)]
pub struct MappedRange {
    pub lo: f64,
    pub hi: f64,
    pub log_max: f64,
}

fn clean(v: f64) -> f64 {
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

/// Locates `[u_lo, u_hi]` outside which `φ(x(u)) + log J(u)` stays more than
/// [`NEGLIGIBLE_DROP`] below its maximum and keeps decreasing.
pub fn locate_range<F: Fn(f64) -> f64>(map: CoordMap, log_weight: F) -> Result<MappedRange> {
    let phi = |u: f64| {
        let x = map.x(u);
        let v = clean(log_weight(x));
        if v == f64::NEG_INFINITY {
            v
        } else {
            v + map.log_jacobian(u)
        }
    };
    let n = (2.0 * SCAN_HALF_WIDTH / SCAN_STEP).round() as usize;
    let grid: Vec<f64> = (0..=n)
        .map(|i| -SCAN_HALF_WIDTH + i as f64 * SCAN_STEP)
        .collect();
    let vals: Vec<f64> = grid.iter().map(|&u| phi(u)).collect();
    let mut log_max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if log_max == f64::NEG_INFINITY || log_max.is_nan() {
        // Nothing visible in the scan window; widen once with a coarse sweep.
        let coarse: Vec<(f64, f64)> = (-70..=70)
            .map(|i| {
                let u = i as f64 * 10.0;
                (u, phi(u))
            })
            .collect();
        let (u_best, v_best) = coarse
            .iter()
            .cloned()
            .fold((0.0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        if v_best == f64::NEG_INFINITY {
            return Err(Error::Numeric(
                "integrand vanishes on the whole support".into(),
            ));
        }
        return locate_around(phi, u_best - 10.0, u_best + 10.0, v_best);
    }
    let threshold = log_max - NEGLIGIBLE_DROP;
    let first = vals.iter().position(|&v| v >= threshold).unwrap();
    let last = vals.iter().rposition(|&v| v >= threshold).unwrap();
    let mut lo = grid[first.saturating_sub(1)];
    let mut hi = grid[(last + 1).min(n)];
    if first == 0 {
        lo = extend(&phi, grid[0], -1.0, &mut log_max)?;
    }
    if last == n {
        hi = extend(&phi, grid[n], 1.0, &mut log_max)?;
    }
    Ok(MappedRange { lo, hi, log_max })
}

fn locate_around<P: Fn(f64) -> f64>(phi: P, a: f64, b: f64, mut log_max: f64) -> Result<MappedRange> {
    let steps = 400;
    let h = (b - a) / steps as f64;
    let vals: Vec<f64> = (0..=steps).map(|i| phi(a + i as f64 * h)).collect();
    log_max = vals.iter().cloned().fold(log_max, f64::max);
    let threshold = log_max - NEGLIGIBLE_DROP;
    let first = vals.iter().position(|&v| v >= threshold).unwrap_or(0);
    let last = vals.iter().rposition(|&v| v >= threshold).unwrap_or(steps);
    let mut lo = a + first.saturating_sub(1) as f64 * h;
    let mut hi = a + (last + 1).min(steps) as f64 * h;
    if first == 0 {
        lo = extend(&phi, a, -1.0, &mut log_max)?;
    }
    if last == steps {
        hi = extend(&phi, b, 1.0, &mut log_max)?;
    }
    Ok(MappedRange { lo, hi, log_max })
}

/// Walks outward from `start` with doubling steps until the integrand is
/// negligible and decreasing; reports divergence if the walk reaches the
/// limit of representable `x`.
fn extend<P: Fn(f64) -> f64>(phi: &P, start: f64, dir: f64, log_max: &mut f64) -> Result<f64> {
    let mut step = SCAN_STEP;
    let mut u = start;
    let mut prev = phi(u);
    loop {
        let next_u = u + dir * step;
        if next_u.abs() > MAX_ABS_U {
            let tail = if dir < 0.0 { Tail::Lower } else { Tail::Upper };
            return Err(Error::Divergence {
                tail,
                context: format!(
                    "integrand not dominated at mapped coordinate {next_u:.1} (log value {prev:.3e})"
                ),
            });
        }
        let v = phi(next_u);
        if v > *log_max {
            *log_max = v;
        }
        if v < *log_max - NEGLIGIBLE_DROP && v <= prev {
            return Ok(next_u);
        }
        prev = v;
        u = next_u;
        step = (step * 2.0).min(16.0);
    }
}

struct Panel<const K: usize> {
    a: f64,
    b: f64,
    kronrod: [f64; K],
    abs: [f64; K],
    err: [f64; K],
}

fn gk15<const K: usize, G>(g: &G, a: f64, b: f64) -> Panel<K>
where
    G: Fn(f64) -> (f64, [f64; K]),
{
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut kr = [0.0; K];
    let mut ga = [0.0; K];
    let mut ab = [0.0; K];
    for (j, (&xk, &wk)) in XGK.iter().zip(WGK.iter()).enumerate() {
        let nodes: &[f64] = if xk == 0.0 { &[0.0] } else { &[-1.0, 1.0] };
        for &sgn in nodes {
            let (w, s) = g(c + sgn * h * xk);
            for k in 0..K {
                let v = w * s[k];
                kr[k] += wk * v;
                ab[k] += wk * v.abs();
                if j % 2 == 1 {
                    ga[k] += WG[j / 2] * v;
                }
            }
        }
    }
    let mut err = [0.0; K];
    for k in 0..K {
        kr[k] *= h;
        ab[k] *= h;
        // QUADPACK-style scaling of the Kronrod–Gauss difference
        let diff = (kr[k] - ga[k] * h).abs();
        err[k] = if ab[k] > 0.0 && diff > 0.0 {
            ab[k] * (200.0 * diff / ab[k]).powf(1.5).min(1.0)
        } else {
            diff
        };
        err[k] = err[k].max(50.0 * f64::EPSILON * ab[k]);
    }
    Panel {
        a,
        b,
        kronrod: kr,
        abs: ab,
        err,
    }
}

/// Adaptive Gauss–Kronrod integration on the mapped coordinate.
pub fn integrate_mapped<const K: usize, F, S>(
    map: CoordMap,
    log_weight: F,
    stats: S,
    rel_tol: f64,
) -> Result<ScaledIntegral<K>>
where
    F: Fn(f64) -> f64,
    S: Fn(f64) -> [f64; K],
{
    let range = locate_range(map, &log_weight)?;
    let shift = range.log_max;
    let g = |u: f64| -> (f64, [f64; K]) {
        let x = map.x(u);
        let lw = clean(log_weight(x));
        if lw == f64::NEG_INFINITY {
            return (0.0, [0.0; K]);
        }
        let w = (lw + map.log_jacobian(u) - shift).exp();
        if w == 0.0 {
            (0.0, [0.0; K])
        } else {
            (w, stats(x))
        }
    };
    let panels_init = (((range.hi - range.lo) / INITIAL_PANEL_WIDTH).ceil() as usize).clamp(4, 256);
    let width = (range.hi - range.lo) / panels_init as f64;
    let mut panels: Vec<Panel<K>> = (0..panels_init)
        .map(|i| {
            let a = range.lo + i as f64 * width;
            let b = if i + 1 == panels_init { range.hi } else { a + width };
            gk15(&g, a, b)
        })
        .collect();
    loop {
        let mut total = [0.0; K];
        let mut total_abs = [0.0; K];
        let mut total_err = [0.0; K];
        for p in &panels {
            for k in 0..K {
                total[k] += p.kronrod[k];
                total_abs[k] += p.abs[k];
                total_err[k] += p.err[k];
            }
        }
        // statistics that nearly cancel get an absolute floor tied to the
        // weight integral; their rounding noise is not resolvable anyway
        let floor = STAT_ABS_FLOOR * total_abs[0];
        let scale: [f64; K] =
            std::array::from_fn(|k| total_abs[k].max(floor).max(f64::MIN_POSITIVE));
        let converged = (0..K).all(|k| total_err[k] <= rel_tol * scale[k]);
        if converged || panels.len() >= MAX_PANELS {
            if !converged {
                let worst = (0..K)
                    .map(|k| total_err[k] / scale[k])
                    .fold(0.0, f64::max);
                if worst > 1e-6 {
                    return Err(Error::Numeric(format!(
                        "quadrature did not reach tolerance (relative error {worst:.2e})"
                    )));
                }
            }
            if !(total[0] > 0.0) {
                return Err(Error::Numeric("integral of positive weight is not positive".into()));
            }
            return Ok(ScaledIntegral {
                shift,
                values: total,
                evaluations: panels.len() * 15,
            });
        }
        // split the panel contributing most to the normalized error
        let (idx, _) = panels
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let e = (0..K).map(|k| p.err[k] / scale[k]).fold(0.0, f64::max);
                (i, e)
            })
            .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a });
        let p = panels.swap_remove(idx);
        let mid = 0.5 * (p.a + p.b);
        panels.push(gk15(&g, p.a, mid));
        panels.push(gk15(&g, mid, p.b));
    }
}

/// Sums `e^{φ(k)} s(k)` over `k = 0, 1, …, max`.
pub fn sum_lattice<const K: usize, F, S>(
    max: Option<u64>,
    log_weight: F,
    stats: S,
) -> Result<ScaledIntegral<K>>
where
    F: Fn(u64) -> f64,
    S: Fn(u64) -> [f64; K],
{
    let mut acc = ScaledAcc::<K>::default();
    let mut prev = f64::NEG_INFINITY;
    let mut settled = 0;
    let limit = max.unwrap_or(LATTICE_MAX_TERMS);
    let mut k = 0u64;
    loop {
        let lw = clean(log_weight(k));
        if lw > f64::NEG_INFINITY {
            acc.add(lw, &stats(k));
        }
        if k >= limit {
            if max.is_none() {
                return Err(Error::Divergence {
                    tail: Tail::Upper,
                    context: format!("lattice sum not settled after {k} terms"),
                });
            }
            break;
        }
        if k >= 1 && lw < prev && acc.shift > f64::NEG_INFINITY {
            let log_ratio = lw - prev;
            // geometric majorant of the remaining tail relative to the sum
            let log_tail = lw + log_ratio - (-log_ratio.exp_m1()).ln();
            let log_total = acc.log_sum(0);
            // margin for polynomially growing statistics
            let log_stat = stats_log_bound(&stats(k));
            if log_tail + log_stat - log_total < LATTICE_TAIL_TOL.ln() {
                settled += 1;
                if settled >= 3 {
                    break;
                }
            } else {
                settled = 0;
            }
        } else {
            settled = 0;
            if k >= LATTICE_DIVERGENCE_CHECK && lw >= prev && lw > f64::NEG_INFINITY {
                return Err(Error::Divergence {
                    tail: Tail::Upper,
                    context: format!("lattice terms still increasing at k = {k}"),
                });
            }
        }
        prev = lw;
        k += 1;
    }
    if !(acc.sums[0] > 0.0) {
        return Err(Error::Numeric("lattice weights sum to zero".into()));
    }
    Ok(ScaledIntegral {
        shift: acc.shift,
        values: acc.sums,
        evaluations: k as usize + 1,
    })
}

fn stats_log_bound<const K: usize>(s: &[f64; K]) -> f64 {
    s.iter().map(|v| v.abs()).fold(1.0, f64::max).ln()
}

/// `log Σ e^{v_i}` over a slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
