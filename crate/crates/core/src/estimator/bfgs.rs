//! Dense BFGS with a strong-Wolfe line search.
//!
//! The objective returns `None` for infeasible points; the line search treats
//! those as `+∞` and backtracks.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Gradient ∞-norm threshold.
    pub gtol: f64,
    /// Relative objective-change threshold.
    pub ftol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { max_iter: 500, gtol: 1e-5, ftol: 1e-9 }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: DVector<f64>,
    pub f: f64,
    pub grad: DVector<f64>,
    pub n_iter: usize,
    pub n_eval: usize,
    pub converged: bool,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
/// Relative objective noise below which the approximate Wolfe test applies.
const NOISE: f64 = 1e-12;

struct Probe {
    alpha: f64,
    f: f64,
    dphi: f64,
    x: DVector<f64>,
    g: DVector<f64>,
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Minimises `f`, which writes the gradient into its second argument.
pub fn minimize<F>(mut f: F, x0: DVector<f64>, opts: &BfgsOptions) -> Option<BfgsResult>
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> Option<f64>,
{
    let n = x0.len();
    let mut n_eval = 1;
    let mut g = DVector::zeros(n);
    let mut fx = f(&x0, &mut g)?;
    let mut x = x0;
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut first = true;
    let mut last_rel = f64::INFINITY;

    for iter in 0..opts.max_iter {
        let gnorm = inf_norm(&g);
        if gnorm < opts.gtol && (iter == 0 || last_rel < opts.ftol) {
            return Some(BfgsResult { x, f: fx, grad: g, n_iter: iter, n_eval, converged: true });
        }

        let mut d = -(&h_inv * &g);
        let mut slope = d.dot(&g);
        if !(slope < 0.0) {
            h_inv = DMatrix::identity(n, n);
            d = -g.clone();
            slope = d.dot(&g);
            first = true;
        }
        let init_step = if first { (1.0 / inf_norm(&d).max(1e-12)).min(1.0) } else { 1.0 };

        let probe = match wolfe_search(&mut f, &x, fx, slope, &d, init_step, &mut n_eval) {
            Some(p) => p,
            None => {
                if !first {
                    h_inv = DMatrix::identity(n, n);
                    first = true;
                    continue;
                }
                return Some(BfgsResult { x, f: fx, grad: g, n_iter: iter, n_eval, converged: gnorm < opts.gtol });
            }
        };

        let s = &probe.x - &x;
        let y = &probe.g - &g;
        let sy = s.dot(&y);
        last_rel = (fx - probe.f).abs() / fx.abs().max(1.0);
        x = probe.x;
        fx = probe.f;
        g = probe.g;

        if sy > 1e-12 * s.norm() * y.norm() {
            if first {
                h_inv *= sy / y.dot(&y);
                first = false;
            }
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            // H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ
            h_inv += (&s * s.transpose()) * (rho * rho * yhy + rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
    }
    let converged = inf_norm(&g) < opts.gtol;
    Some(BfgsResult { x, f: fx, grad: g, n_iter: opts.max_iter, n_eval, converged })
}

/// Gradient-only acceptance for steps whose objective change is lost in
/// rounding: `(2c₁ − 1)φ'(0) ≥ φ'(α) ≥ c₂φ'(0)` with `φ(α) ≤ φ(0) + ε|φ(0)|`.
fn approx_wolfe(cur: &Probe, f0: f64, slope0: f64) -> bool {
    cur.f.is_finite()
        && cur.f <= f0 + NOISE * f0.abs()
        && cur.dphi <= (2.0 * C1 - 1.0) * slope0
        && cur.dphi >= C2 * slope0
}

fn evaluate<F>(f: &mut F, x: &DVector<f64>, d: &DVector<f64>, alpha: f64, n_eval: &mut usize) -> Probe
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> Option<f64>,
{
    *n_eval += 1;
    let xn = x + d * alpha;
    let mut gn = DVector::zeros(x.len());
    match f(&xn, &mut gn) {
        Some(v) if v.is_finite() => {
            let dphi = gn.dot(d);
            Probe { alpha, f: v, dphi, x: xn, g: gn }
        }
        _ => Probe { alpha, f: f64::INFINITY, dphi: f64::NAN, x: xn, g: gn },
    }
}

/// Minimiser of the cubic through two points with slopes, falling back to
/// bisection when it leaves the safeguarded interior.
fn interpolate(lo: &Probe, hi: &Probe) -> f64 {
    let (a0, a1) = (lo.alpha, hi.alpha);
    let mid = 0.5 * (a0 + a1);
    if !hi.f.is_finite() || !hi.dphi.is_finite() {
        return mid;
    }
    let d1 = lo.dphi + hi.dphi - 3.0 * (lo.f - hi.f) / (a0 - a1);
    let disc = d1 * d1 - lo.dphi * hi.dphi;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (a1 - a0).signum() * disc.sqrt();
    let a = a1 - (a1 - a0) * (hi.dphi + d2 - d1) / (hi.dphi - lo.dphi + 2.0 * d2);
    let (l, u) = if a0 < a1 { (a0, a1) } else { (a1, a0) };
    let margin = 0.1 * (u - l);
    if a.is_finite() && a > l + margin && a < u - margin {
        a
    } else {
        mid
    }
}

fn wolfe_search<F>(
    f: &mut F,
    x: &DVector<f64>,
    f0: f64,
    slope0: f64,
    d: &DVector<f64>,
    init_step: f64,
    n_eval: &mut usize,
) -> Option<Probe>
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> Option<f64>,
{
    let origin = Probe { alpha: 0.0, f: f0, dphi: slope0, x: x.clone(), g: DVector::zeros(0) };
    let mut prev = origin;
    let mut alpha = init_step;
    for i in 0..30 {
        let cur = evaluate(f, x, d, alpha, n_eval);
        if approx_wolfe(&cur, f0, slope0) {
            return Some(cur);
        }
        if !cur.f.is_finite() || cur.f > f0 + C1 * alpha * slope0 || (i > 0 && cur.f >= prev.f) {
            return zoom(f, x, f0, slope0, d, prev, cur, n_eval);
        }
        if cur.dphi.abs() <= -C2 * slope0 {
            return Some(cur);
        }
        if cur.dphi >= 0.0 {
            return zoom(f, x, f0, slope0, d, cur, prev, n_eval);
        }
        prev = cur;
        alpha *= 2.0;
    }
    None
}

#[allow(clippy::too_many_arguments)]
fn zoom<F>(
    f: &mut F,
    x: &DVector<f64>,
    f0: f64,
    slope0: f64,
    d: &DVector<f64>,
    mut lo: Probe,
    mut hi: Probe,
    n_eval: &mut usize,
) -> Option<Probe>
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> Option<f64>,
{
    for _ in 0..40 {
        let alpha = interpolate(&lo, &hi);
        if (hi.alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1.0) {
            break;
        }
        let cur = evaluate(f, x, d, alpha, n_eval);
        if approx_wolfe(&cur, f0, slope0) {
            return Some(cur);
        }
        if !cur.f.is_finite() || cur.f > f0 + C1 * alpha * slope0 || cur.f >= lo.f {
            hi = cur;
        } else {
            if cur.dphi.abs() <= -C2 * slope0 {
                return Some(cur);
            }
            if cur.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    // accept a sufficient-decrease point even if the curvature test failed
    if lo.alpha > 0.0 && lo.f < f0 {
        Some(lo)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let rosen = |x: &DVector<f64>, g: &mut DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            Some((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2))
        };
        let r = minimize(rosen, DVector::from_vec(vec![-1.2, 1.0]), &BfgsOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn quadratic_with_infeasible_region() {
        // minimum at 0.9 inside the feasible region x < 1
        let f = |x: &DVector<f64>, g: &mut DVector<f64>| {
            if x[0] >= 1.0 {
                return None;
            }
            g[0] = 2.0 * (x[0] - 0.9);
            g[1] = 4.0 * x[1];
            Some((x[0] - 0.9).powi(2) + 2.0 * x[1] * x[1])
        };
        let r = minimize(f, DVector::from_vec(vec![-5.0, 3.0]), &BfgsOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 0.9).abs() < 1e-6 && r.x[1].abs() < 1e-6);
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let f = |_: &DVector<f64>, _: &mut DVector<f64>| None;
        assert!(minimize(f, DVector::zeros(2), &BfgsOptions::default()).is_none());
    }
}
