//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Vector4};

use crate::error::{Error, Result};

/// Largest eigenvalue modulus of a 2×2 matrix.
pub fn spectral_radius2(a: &Matrix2<f64>) -> f64 {
    let tr = a.trace();
    let det = a.determinant();
    let disc = 0.25 * tr * tr - det;
    if disc < 0.0 {
        det.abs().sqrt()
    } else {
        let s = disc.sqrt();
        (0.5 * tr + s).abs().max((0.5 * tr - s).abs())
    }
}

#[inline]
pub fn symmetrize2(p: &Matrix2<f64>) -> Matrix2<f64> {
    let off = 0.5 * (p[(0, 1)] + p[(1, 0)]);
    Matrix2::new(p[(0, 0)], off, off, p[(1, 1)])
}

pub fn symmetrize(p: &DMatrix<f64>) -> DMatrix<f64> {
    (p + p.transpose()) * 0.5
}

/// Solves `S = A S Aᵀ + Q` for a stable 2×2 `A` through the vectorised
/// system `(I − A⊗A) vec(S) = vec(Q)`.
pub fn solve_discrete_lyapunov2(a: &Matrix2<f64>, q: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    let rho = spectral_radius2(a);
    if !(rho < 1.0) {
        return Err(Error::NonStationary(rho));
    }
    // column-major vec: index = row + 2 * col
    let mut k = Matrix4::<f64>::identity();
    for c1 in 0..2 {
        for r1 in 0..2 {
            for c2 in 0..2 {
                for r2 in 0..2 {
                    // (A ⊗ A)[(r1,r2),(c1,c2)] with vec(S) ordering i = r + 2c
                    let row = r2 + 2 * r1;
                    let col = c2 + 2 * c1;
                    k[(row, col)] -= a[(r1, c1)] * a[(r2, c2)];
                }
            }
        }
    }
    let rhs = Vector4::new(q[(0, 0)], q[(1, 0)], q[(0, 1)], q[(1, 1)]);
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or(Error::NonStationary(rho))?;
    Ok(symmetrize2(&Matrix2::new(sol[0], sol[2], sol[1], sol[3])))
}

/// Ordinary least squares through a column-pivot-free QR factorisation.
/// Returns `None` when the design is numerically rank deficient.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    let (n, p) = x.shape();
    if n < p || p == 0 {
        return None;
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = (0..p).map(|i| r[(i, i)].abs()).fold(0.0_f64, f64::max);
    if scale == 0.0 || (0..p).any(|i| r[(i, i)].abs() <= 1e-10 * scale) {
        return None;
    }
    let qty = qr.q().transpose() * y;
    r.solve_upper_triangular(&qty)
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.inverse())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn residual(a: &Matrix2<f64>, q: &Matrix2<f64>, s: &Matrix2<f64>) -> f64 {
        (s - a * s * a.transpose() - q).abs().max()
    }

    fn fixed_point(a: &Matrix2<f64>, q: &Matrix2<f64>) -> Matrix2<f64> {
        let mut s = *q;
        for _ in 0..10_000 {
            s = a * s * a.transpose() + q;
        }
        s
    }

    #[test]
    fn lyapunov_zero_dynamics() {
        let s = solve_discrete_lyapunov2(&Matrix2::zeros(), &Matrix2::identity()).unwrap();
        assert!((s - Matrix2::identity()).abs().max() < 1e-14);
    }

    #[test]
    fn lyapunov_diagonal() {
        let a = Matrix2::new(0.7, 0.0, 0.0, 0.7);
        let q = Matrix2::identity();
        let s = solve_discrete_lyapunov2(&a, &q).unwrap();
        let oracle = fixed_point(&a, &q);
        assert!((s - oracle).abs().max() < 1e-12);
        assert!((s[(0, 0)] - 1.0 / 0.51).abs() < 1e-12);
        assert!(residual(&a, &q, &s) <= 1e-10);
    }

    #[test]
    fn lyapunov_cross_lagged() {
        let a = Matrix2::new(0.2, 0.3, 0.0, 0.2);
        let q = Matrix2::identity();
        let s = solve_discrete_lyapunov2(&a, &q).unwrap();
        let oracle = fixed_point(&a, &q);
        assert!((s - oracle).abs().max() < 1e-12);
        // frozen from the fixed-point iteration above
        assert!((s[(0, 0)] - 1.147_461).abs() < 1e-6, "{}", s[(0, 0)]);
        assert!((s[(0, 1)] - 0.065_104).abs() < 1e-6, "{}", s[(0, 1)]);
        assert!((s[(1, 1)] - 1.041_667).abs() < 1e-6);
        assert!(residual(&a, &q, &s) <= 1e-10);
    }

    #[test]
    fn lyapunov_rejects_unit_root() {
        let a = Matrix2::new(1.0, 0.0, 0.0, 0.5);
        assert!(matches!(
            solve_discrete_lyapunov2(&a, &Matrix2::identity()),
            Err(Error::NonStationary(_))
        ));
    }

    #[test]
    fn spectral_radius_complex_pair() {
        let a = Matrix2::new(0.0, -0.5, 0.5, 0.0);
        assert!((spectral_radius2(&a) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn ols_recovers_exact_line() {
        let x = DMatrix::from_fn(10, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let y = DVector::from_fn(10, |i, _| 2.0 + 0.5 * i as f64);
        let b = least_squares(&x, &y).unwrap();
        assert!((b[0] - 2.0).abs() < 1e-12 && (b[1] - 0.5).abs() < 1e-12);
        let dup = DMatrix::from_fn(10, 2, |_, _| 1.0);
        assert!(least_squares(&dup, &y).is_none());
    }
}
