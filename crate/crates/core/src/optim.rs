//! Derivative-free optimizers used by the exponent computations.
//!
//! Multi-dimensional searches run in a transformed coordinate system where
//! positive-scale parameters live on a log axis; see [`SearchSpace`].

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::families::ParamBox;

/// Lexicographic order on parameter vectors, used to break ties.
pub fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

/// One search coordinate: bounds in transformed units and whether the
/// transform is `ln`. `param_lo`/`param_hi` keep the original bounds so that
/// boundary points map back exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub log: bool,
    pub param_lo: f64,
    pub param_hi: f64,
}

impl Axis {
    pub fn to_param(&self, u: f64) -> f64 {
        if u <= self.lo {
            return self.param_lo;
        }
        if u >= self.hi {
            return self.param_hi;
        }
        let p = if self.log { u.exp() } else { u };
        p.clamp(self.param_lo, self.param_hi)
    }

    pub fn to_search(&self, p: f64) -> f64 {
        if self.log {
            p.ln()
        } else {
            p
        }
    }

    pub fn is_fixed(&self) -> bool {
        self.lo == self.hi
    }

    /// `count` evenly spaced points in transformed units.
    pub fn points(&self, count: usize) -> Vec<f64> {
        if self.is_fixed() || count <= 1 {
            return vec![if self.is_fixed() { self.lo } else { 0.5 * (self.lo + self.hi) }];
        }
        (0..count)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / (count - 1) as f64)
            .collect()
    }
}

/// Product of axes; log-spaced for positive-scale coordinates, linear
/// otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub axes: Vec<Axis>,
}

/// Upper bound on the number of grid points a product grid may hold.
const MAX_GRID_POINTS: usize = 250_000;

impl SearchSpace {
    pub fn from_box(b: &ParamBox) -> Self {
        let axes = (0..b.dim())
            .map(|i| {
                let log = b.is_log_axis(i);
                let t = |v: f64| if log { v.ln() } else { v };
                Axis {
                    lo: t(b.lower[i]),
                    hi: t(b.upper[i]),
                    log,
                    param_lo: b.lower[i],
                    param_hi: b.upper[i],
                }
            })
            .collect();
        SearchSpace { axes }
    }

    /// Linear axes on `[lower[i], upper[i]]`, regardless of sign.
    pub fn linear(lower: &[f64], upper: &[f64]) -> Self {
        let axes = lower
            .iter()
            .zip(upper)
            .map(|(&lo, &hi)| Axis {
                lo,
                hi,
                log: false,
                param_lo: lo,
                param_hi: hi,
            })
            .collect();
        SearchSpace { axes }
    }

    /// Concatenation of two boxes, e.g. the joint `(θ, γ)` space.
    pub fn joint(a: &ParamBox, b: &ParamBox) -> Self {
        let mut s = Self::from_box(a);
        s.axes.extend(Self::from_box(b).axes);
        s
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn to_param(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.axes).map(|(v, a)| a.to_param(*v)).collect()
    }

    pub fn to_search(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.axes).map(|(v, a)| a.to_search(*v)).collect()
    }

    pub fn clip(&self, u: &mut [f64]) {
        for (v, a) in u.iter_mut().zip(&self.axes) {
            *v = v.clamp(a.lo, a.hi);
        }
    }

    pub fn free_axes(&self) -> usize {
        self.axes.iter().filter(|a| !a.is_fixed()).count()
    }

    /// Product grid in transformed units with `resolution` points per free
    /// axis, thinned if the product would exceed [`MAX_GRID_POINTS`].
    pub fn grid_points(&self, resolution: usize) -> Vec<Vec<f64>> {
        let free = self.free_axes() as u32;
        let mut res = resolution.max(1);
        while free > 0 && res > 2 && res.saturating_pow(free) > MAX_GRID_POINTS {
            res -= 1;
        }
        let per_axis: Vec<Vec<f64>> = self.axes.iter().map(|a| a.points(res)).collect();
        let mut out: Vec<Vec<f64>> = vec![Vec::with_capacity(self.dim())];
        for pts in &per_axis {
            let mut next = Vec::with_capacity(out.len() * pts.len());
            for prefix in &out {
                for &p in pts {
                    let mut v = prefix.clone();
                    v.push(p);
                    next.push(v);
                }
            }
            out = next;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    pub max_iter: usize,
    /// Absolute tolerance on simplex size, in transformed units.
    pub xtol: f64,
    /// Tolerance on the spread of function values.
    pub ftol: f64,
    /// Initial step as a fraction of each axis width.
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_iter: 600,
            xtol: 1e-7,
            ftol: 1e-12,
            initial_step: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    /// Minimizer in transformed units.
    pub x: Vec<f64>,
    pub fx: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Nelder–Mead minimization in transformed coordinates with coordinate-wise
/// projection onto the box. Fixed axes are held constant.
pub fn nelder_mead<F>(f: &F, x0: &[f64], space: &SearchSpace, opts: &NelderMeadOptions) -> NelderMeadResult
where
    F: Fn(&[f64]) -> f64 + ?Sized,
{
    let free: Vec<usize> = (0..space.dim()).filter(|&i| !space.axes[i].is_fixed()).collect();
    let mut base = x0.to_vec();
    space.clip(&mut base);
    let mut evals = 0usize;
    let mut eval = |v: &[f64]| -> f64 {
        evals += 1;
        let y = f(v);
        if y.is_nan() {
            f64::INFINITY
        } else {
            y
        }
    };
    let m = free.len();
    if m == 0 {
        let fx = eval(&base);
        return NelderMeadResult {
            x: base,
            fx,
            iterations: 0,
            evaluations: evals,
            converged: true,
        };
    }
    let embed = |y: &[f64], base: &[f64]| -> Vec<f64> {
        let mut v = base.to_vec();
        for (k, &i) in free.iter().enumerate() {
            v[i] = y[k].clamp(space.axes[i].lo, space.axes[i].hi);
        }
        v
    };
    let y0: Vec<f64> = free.iter().map(|&i| base[i]).collect();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(m + 1);
    simplex.push((y0.clone(), eval(&embed(&y0, &base))));
    for (k, &i) in free.iter().enumerate() {
        let a = space.axes[i];
        let step = opts.initial_step * (a.hi - a.lo);
        let mut y = y0.clone();
        // step inward when starting on the upper face
        y[k] = if y0[k] + step <= a.hi { y0[k] + step } else { y0[k] - step };
        let v = eval(&embed(&y, &base));
        simplex.push((y, v));
    }
    let clip_y = |y: &mut Vec<f64>| {
        for (k, &i) in free.iter().enumerate() {
            y[k] = y[k].clamp(space.axes[i].lo, space.axes[i].hi);
        }
    };
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| lex_cmp(&a.0, &b.0)));
        let best = simplex[0].1;
        let worst = simplex[m].1;
        let fspread = if best.is_finite() && worst.is_finite() {
            (worst - best).abs()
        } else if best == worst {
            0.0
        } else {
            f64::INFINITY
        };
        let size = simplex[1..]
            .iter()
            .map(|(y, _)| {
                y.iter()
                    .zip(&simplex[0].0)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if size <= opts.xtol && fspread <= opts.ftol * (1.0 + best.abs()) {
            converged = true;
            break;
        }
        if size <= 1e-14 {
            converged = fspread.is_finite();
            break;
        }
        iterations += 1;
        let centroid: Vec<f64> = (0..m)
            .map(|k| simplex[..m].iter().map(|(y, _)| y[k]).sum::<f64>() / m as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            let mut y: Vec<f64> = (0..m)
                .map(|k| centroid[k] + t * (simplex[m].0[k] - centroid[k]))
                .collect();
            clip_y(&mut y);
            y
        };
        let yr = along(-1.0);
        let fr = eval(&embed(&yr, &base));
        if fr < simplex[0].1 {
            let ye = along(-2.0);
            let fe = eval(&embed(&ye, &base));
            simplex[m] = if fe < fr { (ye, fe) } else { (yr, fr) };
        } else if fr < simplex[m - 1].1 {
            simplex[m] = (yr, fr);
        } else {
            let (yc, fc) = if fr < simplex[m].1 {
                let y = along(-0.5);
                let v = eval(&embed(&y, &base));
                (y, v)
            } else {
                let y = along(0.5);
                let v = eval(&embed(&y, &base));
                (y, v)
            };
            if fc < simplex[m].1.min(fr) {
                simplex[m] = (yc, fc);
            } else {
                let y_best = simplex[0].0.clone();
                for s in simplex.iter_mut().skip(1) {
                    let mut y: Vec<f64> =
                        s.0.iter().zip(&y_best).map(|(a, b)| b + 0.5 * (a - b)).collect();
                    clip_y(&mut y);
                    let v = eval(&embed(&y, &base));
                    *s = (y, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| lex_cmp(&a.0, &b.0)));
    let (y, fx) = simplex.swap_remove(0);
    NelderMeadResult {
        x: embed(&y, &base),
        fx,
        iterations,
        evaluations: evals,
        converged,
    }
}

/// Local minimization from `x0`: Brent's method along the single free axis
/// when there is one (searching `radius` transformed units either side and
/// re-centering while the minimum sits on an interior bracket end), the
/// simplex method otherwise. Box faces reached by the 1-D search are
/// evaluated exactly so boundary optima land on the face.
pub fn local_minimize<F>(f: &F, x0: &[f64], space: &SearchSpace, radius: f64, opts: &NelderMeadOptions) -> NelderMeadResult
where
    F: Fn(&[f64]) -> f64 + ?Sized,
{
    let free: Vec<usize> = (0..space.dim()).filter(|&i| !space.axes[i].is_fixed()).collect();
    let mut x = x0.to_vec();
    space.clip(&mut x);
    let clean = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
    if free.is_empty() {
        let fx = clean(f(&x));
        return NelderMeadResult {
            x,
            fx,
            iterations: 0,
            evaluations: 1,
            converged: true,
        };
    }
    if free.len() > 1 {
        return nelder_mead(f, &x, space, opts);
    }
    let i = free[0];
    let axis = space.axes[i];
    let evals = std::cell::Cell::new(0usize);
    let eval = |v: f64| {
        evals.set(evals.get() + 1);
        let mut p = x.clone();
        p[i] = v;
        clean(f(&p))
    };
    let mut center = x[i];
    let mut best = (center, eval(center));
    let mut rounds = 0;
    loop {
        rounds += 1;
        let a = (center - radius).max(axis.lo);
        let b = (center + radius).min(axis.hi);
        let (u, fu) = brent_minimize(&eval, a, b, opts.xtol, 200);
        if fu < best.1 || (fu == best.1 && u < best.0) {
            best = (u, fu);
        }
        for (end, face) in [(a, axis.lo), (b, axis.hi)] {
            if end == face && (best.0 - face).abs() <= 1e3 * opts.xtol * (1.0 + face.abs()) {
                let fe = eval(face);
                if fe <= best.1 {
                    best = (face, fe);
                }
            }
        }
        let near_interior_end = (a > axis.lo && best.0 - a <= 0.01 * radius)
            || (b < axis.hi && b - best.0 <= 0.01 * radius);
        if !near_interior_end || rounds >= 20 {
            break;
        }
        center = best.0;
    }
    x[i] = best.0;
    NelderMeadResult {
        x,
        fx: best.1,
        iterations: rounds,
        evaluations: evals.get(),
        converged: rounds < 20,
    }
}

/// Brent's golden-section/parabolic minimization on `[a, b]`.
pub fn brent_minimize<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64, max_iter: usize) -> (f64, f64) {
    const CGOLD: f64 = 0.381_966_011_250_105;
    let (mut a, mut b) = if a < b { (a, b) } else { (b, a) };
    let mut x = a + CGOLD * (b - a);
    let mut w = x;
    let mut v = x;
    let mut fx = f(x);
    let mut fw = fx;
    let mut fv = fx;
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..max_iter {
        let xm = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-14;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = tol1.copysign(xm - x);
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

/// Brent's root finder (bisection / secant / inverse quadratic) on a
/// bracket with `f(a)` and `f(b)` of opposite signs.
pub fn brent_root<F: FnMut(f64) -> Result<f64>>(
    mut f: F,
    mut a: f64,
    mut b: f64,
    mut fa: f64,
    mut fb: f64,
    tol: f64,
    max_iter: usize,
) -> Result<f64> {
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(Error::Numeric(format!(
            "root not bracketed: f({a}) = {fa}, f({b}) = {fb}"
        )));
    }
    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut e = d;
    for _ in 0..max_iter {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs() + 0.5 * tol;
        let xm = 0.5 * (c - b);
        if xm.abs() <= tol1 || fb == 0.0 {
            return Ok(b);
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * xm * s;
                q = 1.0 - s;
            } else {
                let qa = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * xm * qa * (qa - r) - (b - a) * (r - 1.0));
                q = (qa - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            }
            p = p.abs();
            if 2.0 * p < (3.0 * xm * q - (tol1 * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol1 { d } else { tol1.copysign(xm) };
        fb = f(b)?;
    }
    Err(Error::Optimization {
        reason: "root finder exhausted its iterations".into(),
        incumbent: Some((vec![b], fb)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brent_minimize_quadratic() {
        let (x, fx) = brent_minimize(|x| (x - 0.3).powi(2) + 1.0, 0.0, 1.0, 1e-10, 200);
        assert!((x - 0.3).abs() < 1e-8);
        assert!((fx - 1.0).abs() < 1e-15);
    }

    #[test]
    fn brent_root_cubic() {
        let f = |x: f64| Ok(x * x * x - 2.0);
        let r = brent_root(f, 0.0, 2.0, -2.0, 6.0, 1e-12, 100).unwrap();
        assert!((r - 2f64.cbrt()).abs() < 1e-11);
    }

    #[test]
    fn root_requires_bracket() {
        assert!(brent_root(|x: f64| Ok(x * x + 1.0), -1.0, 1.0, 2.0, 2.0, 1e-10, 50).is_err());
    }

    #[test]
    fn nelder_mead_rosenbrock_in_box() {
        let b = ParamBox::new(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap();
        let s = SearchSpace::from_box(&b);
        let f = |u: &[f64]| (1.0 - u[0]).powi(2) + 100.0 * (u[1] - u[0] * u[0]).powi(2);
        let opts = NelderMeadOptions {
            max_iter: 5000,
            xtol: 1e-10,
            ftol: 1e-16,
            ..Default::default()
        };
        let r = nelder_mead(&f, &[-1.0, 1.5], &s, &opts);
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5, "{:?}", r.x);
    }

    #[test]
    fn nelder_mead_respects_bounds_and_fixed_axes() {
        let b = ParamBox::new(vec![1.0, 3.0], vec![5.0, 3.0]).unwrap();
        let s = SearchSpace::from_box(&b);
        assert!(s.axes[0].log);
        let f = |u: &[f64]| {
            let p = s.to_param(u);
            (p[0] - 0.2).powi(2) + p[1]
        };
        let r = nelder_mead(&f, &s.to_search(&[3.0, 3.0]), &s, &NelderMeadOptions::default());
        let p = s.to_param(&r.x);
        assert!((p[0] - 1.0).abs() < 1e-6);
        assert_eq!(p[1], 3.0);
    }

    #[test]
    fn grid_is_log_spaced_for_scales() {
        let b = ParamBox::new(vec![0.01], vec![100.0]).unwrap();
        let s = SearchSpace::from_box(&b);
        let g = s.grid_points(5);
        let p: Vec<f64> = g.iter().map(|u| s.to_param(u)[0]).collect();
        let expect = [0.01, 0.1, 1.0, 10.0, 100.0];
        for (a, b) in p.iter().zip(expect) {
            assert!((a / b - 1.0).abs() < 1e-12);
        }
    }
}
