//! Natural cubic spline regression in the truncated-power basis.

use nalgebra::{DMatrix, DVector};

use crate::linalg::least_squares;

/// `K` knots evenly spaced over `[0, 1]`, boundaries included.
pub fn even_knots(k: usize) -> Vec<f64> {
    let k = k.max(2);
    (0..k).map(|i| i as f64 / (k - 1) as f64).collect()
}

/// Basis `1, x, d₁ − d_{K−1}, …, d_{K−2} − d_{K−1}` with
/// `d_k(x) = ((x − ξ_k)³₊ − (x − ξ_K)³₊) / (ξ_K − ξ_k)`.
pub fn natural_basis(x: &[f64], knots: &[f64]) -> DMatrix<f64> {
    let k = knots.len();
    let cube = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
    let last = knots[k - 1];
    let d = |j: usize, v: f64| (cube(v - knots[j]) - cube(v - last)) / (last - knots[j]);
    DMatrix::from_fn(x.len(), k, |r, c| match c {
        0 => 1.0,
        1 => x[r],
        c => d(c - 2, x[r]) - d(k - 2, x[r]),
    })
}

/// Least-squares fit of `y` on a natural spline of time with `df` basis
/// functions; returns fitted values. `None` if the design is singular.
pub fn fit_spline(y: &[f64], df: usize) -> Option<Vec<f64>> {
    let n = y.len();
    if n < 2 {
        return None;
    }
    let x: Vec<f64> = (0..n).map(|t| t as f64 / (n - 1) as f64).collect();
    let basis = natural_basis(&x, &even_knots(df.min(n)));
    let yv = DVector::from_column_slice(y);
    let beta = least_squares(&basis, &yv)?;
    Some((basis * beta).iter().copied().collect())
}
