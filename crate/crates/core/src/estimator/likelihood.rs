//! Information-form Kalman log-likelihood with a forward-mode analytic
//! gradient.
//!
//! With `M = Σ hᵢhᵢᵀ/rᵢ` and `b = Σ hᵢeᵢ/rᵢ` over the observed indicators the
//! measurement update reduces to 2×2 algebra:
//! `P = (I + P̄M)⁻¹P̄`, `x = x̄ + Pb`,
//! `log|F| = Σ log rᵢ + log|I + P̄M|`, `eᵀF⁻¹e = Σ eᵢ²/rᵢ − bᵀPb`.

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::linalg::{solve_discrete_lyapunov2, symmetrize2};
use crate::model::{block_of, MaskedSeries, ModelParams, N_INDICATORS};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One coordinate of the free-parameter vector, expressed as the model entry
/// it perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Direction {
    /// Transition coefficient `A[row, col]`.
    Transition(usize, usize),
    /// Non-zero loading of indicator `i`.
    Loading(usize),
    /// Log error variance of indicator `i`.
    LogVar(usize),
}

/// Initial state distribution one step before the first observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initialization {
    #[default]
    Stationary,
    Diffuse,
}

/// Observations unpacked into fixed-size rows.
#[derive(Debug, Clone)]
pub(crate) struct PreparedSeries {
    z: Vec<[f64; N_INDICATORS]>,
    observed: Vec<[bool; N_INDICATORS]>,
}

impl PreparedSeries {
    pub fn new(series: &MaskedSeries) -> Self {
        let t_len = series.len();
        let mut z = Vec::with_capacity(t_len);
        let mut observed = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut zr = [0.0; N_INDICATORS];
            let mut or = [false; N_INDICATORS];
            for i in 0..N_INDICATORS {
                zr[i] = series.z[(t, i)];
                or[i] = !series.mask[(t, i)];
            }
            z.push(zr);
            observed.push(or);
        }
        Self { z, observed }
    }
}

#[inline]
fn inverse2(m: &Matrix2<f64>) -> Option<(Matrix2<f64>, f64)> {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    if !(det.abs() > 0.0) || !det.is_finite() {
        return None;
    }
    let inv = Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det;
    Some((inv, det))
}

#[inline]
fn unit(s: usize) -> Vector2<f64> {
    if s == 0 {
        Vector2::new(1.0, 0.0)
    } else {
        Vector2::new(0.0, 1.0)
    }
}

/// Log-likelihood of `data` under `params`; when `grad` is given it receives
/// the derivative with respect to each entry of `dirs`.
///
/// Requires strictly positive error variances.
pub(crate) fn loglik(
    params: &ModelParams,
    data: &PreparedSeries,
    init: Initialization,
    dirs: &[Direction],
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let a = params.a;
    let at = a.transpose();
    let q = params.q;
    let r = params.r;
    let n_dir = if grad.is_some() { dirs.len() } else { 0 };
    let mut h = [Vector2::zeros(); N_INDICATORS];
    for (i, hi) in h.iter_mut().enumerate() {
        *hi = params.h.row(i).transpose();
    }

    let mut x = Vector2::zeros();
    let mut p = match init {
        Initialization::Stationary => solve_discrete_lyapunov2(&a, &q)?,
        Initialization::Diffuse => Matrix2::identity() * crate::kalman::DIFFUSE_VARIANCE,
    };
    let mut dx = vec![Vector2::<f64>::zeros(); n_dir];
    let mut dp = vec![Matrix2::<f64>::zeros(); n_dir];
    let mut da = vec![Matrix2::<f64>::zeros(); n_dir];
    for j in 0..n_dir {
        if let Direction::Transition(rr, cc) = dirs[j] {
            da[j][(rr, cc)] = 1.0;
            if init == Initialization::Stationary {
                let t = da[j] * p * at;
                dp[j] = solve_discrete_lyapunov2(&a, &(t + t.transpose()))?;
            }
        }
    }
    let mut g = vec![0.0; n_dir];
    let mut total = 0.0;

    for (zr, obs) in data.z.iter().zip(&data.observed) {
        let x_bar = a * x;
        let p_bar = symmetrize2(&(a * p * at + q));
        for j in 0..n_dir {
            let dx_bar = da[j] * x + a * dx[j];
            let t = da[j] * p * at;
            dx[j] = dx_bar;
            dp[j] = a * dp[j] * at + t + t.transpose();
        }

        let mut m = Matrix2::zeros();
        let mut b = Vector2::zeros();
        let mut s = 0.0;
        let mut ldr = 0.0;
        let mut k = 0usize;
        let mut e = [0.0; N_INDICATORS];
        for i in 0..N_INDICATORS {
            if !obs[i] {
                continue;
            }
            k += 1;
            let ri = r[i];
            e[i] = zr[i] - h[i].dot(&x_bar);
            m += h[i] * h[i].transpose() / ri;
            b += h[i] * (e[i] / ri);
            s += e[i] * e[i] / ri;
            ldr += ri.ln();
        }
        if k == 0 {
            x = x_bar;
            p = p_bar;
            continue;
        }

        let gm = Matrix2::identity() + p_bar * m;
        let (g_inv, det_g) = inverse2(&gm).ok_or(Error::SingularInnovation(None))?;
        p = symmetrize2(&(g_inv * p_bar));
        let pb = p * b;
        x = x_bar + pb;
        let quad = s - b.dot(&pb);
        total += -0.5 * (k as f64 * LN_2PI + ldr + det_g.ln() + quad);

        for j in 0..n_dir {
            let dx_bar = dx[j];
            let dp_bar = dp[j];
            let mut dm = Matrix2::zeros();
            let mut db = -(m * dx_bar);
            let mut ds = -2.0 * b.dot(&dx_bar);
            let mut dldr = 0.0;
            match dirs[j] {
                Direction::Transition(..) => {}
                Direction::Loading(i) if obs[i] => {
                    let es = unit(block_of(i));
                    let sc = x_bar[block_of(i)];
                    dm = (es * h[i].transpose() + h[i] * es.transpose()) / r[i];
                    db += (es * e[i] - h[i] * sc) / r[i];
                    ds -= 2.0 * e[i] * sc / r[i];
                }
                Direction::LogVar(i) if obs[i] => {
                    dm = -(h[i] * h[i].transpose()) / r[i];
                    db -= h[i] * (e[i] / r[i]);
                    ds -= e[i] * e[i] / r[i];
                    dldr = 1.0;
                }
                _ => {}
            }
            let dg = dp_bar * m + p_bar * dm;
            let dldg = (g_inv * dg).trace();
            let dpj = symmetrize2(&(g_inv * (dp_bar - dg * p)));
            let dquad = ds - 2.0 * db.dot(&pb) - b.dot(&(dpj * b));
            g[j] += -0.5 * (dldr + dldg + dquad);
            dx[j] = dx_bar + dpj * b + p * db;
            dp[j] = dpj;
        }
    }

    if !total.is_finite() {
        return Err(Error::SingularInnovation(None));
    }
    if let Some(out) = grad {
        out[..n_dir].copy_from_slice(&g);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman::{filter_series, FilterState};
    use crate::missingness::apply_mcar;
    use crate::model::{make_condition, simulate};

    #[test]
    fn matches_covariance_form_filter() {
        for &(s2, a, g) in &[(0.25, 0.7, 0.3), (0.75, 0.2, 0.0), (0.75, 0.7, 0.15)] {
            let mut p = make_condition(s2, a, g).unwrap();
            p.r[4] = 0.4;
            p.h[(1, 0)] = -0.3;
            let s = simulate(&p, 300, 11, 20).unwrap();
            let s = apply_mcar(&s, 0.3, 5).unwrap();
            let data = PreparedSeries::new(&s);
            for init in [Initialization::Stationary, Initialization::Diffuse] {
                let start = match init {
                    Initialization::Stationary => FilterState::stationary(&p).unwrap(),
                    Initialization::Diffuse => FilterState::diffuse(),
                };
                let oracle = filter_series(&s, &p, &start).unwrap().loglik;
                let ll = loglik(&p, &data, init, &[], None).unwrap();
                assert!((ll - oracle).abs() <= 1e-10 * oracle.abs(), "{ll} vs {oracle}");
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut p = make_condition(0.25, 0.7, 0.15).unwrap();
        p.a[(1, 0)] = 0.05;
        let s = simulate(&p, 120, 2, 20).unwrap();
        let s = apply_mcar(&s, 0.3, 9).unwrap();
        let data = PreparedSeries::new(&s);
        let mut dirs = vec![
            Direction::Transition(0, 0),
            Direction::Transition(1, 1),
            Direction::Transition(0, 1),
            Direction::Transition(1, 0),
        ];
        dirs.extend((0..6).map(Direction::Loading));
        dirs.extend((0..6).map(Direction::LogVar));
        let mut grad = vec![0.0; dirs.len()];
        loglik(&p, &data, Initialization::Stationary, &dirs, Some(&mut grad)).unwrap();
        let bump = |d: Direction, eps: f64| {
            let mut q = p.clone();
            match d {
                Direction::Transition(r, c) => q.a[(r, c)] += eps,
                Direction::Loading(i) => q.h[(i, block_of(i))] += eps,
                Direction::LogVar(i) => q.r[i] *= eps.exp(),
            }
            loglik(&q, &data, Initialization::Stationary, &[], None).unwrap()
        };
        for (j, &d) in dirs.iter().enumerate() {
            let h = 1e-5;
            let fd = (bump(d, h) - bump(d, -h)) / (2.0 * h);
            assert!((fd - grad[j]).abs() <= 1e-5 * fd.abs().max(1.0), "{d:?}: {fd} vs {}", grad[j]);
        }
    }
}
