//! Kalman filtering with missing observations.
//!
//! Masked indicators are dropped from the measurement update; a fully masked
//! timepoint skips the update and carries the time-update prediction forward.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::linalg::symmetrize2;
use crate::model::{stationary_covariance, MaskedSeries, ModelParams, N_INDICATORS};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Prior variance of the diffuse initialisation.
pub const DIFFUSE_VARIANCE: f64 = 1e7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterState {
    pub x: Vector2<f64>,
    pub p: Matrix2<f64>,
}

impl FilterState {
    /// Zero mean with the stationary covariance of the model.
    pub fn stationary(params: &ModelParams) -> Result<Self> {
        Ok(Self {
            x: Vector2::zeros(),
            p: stationary_covariance(params)?,
        })
    }

    /// Zero mean with a large isotropic covariance.
    pub fn diffuse() -> Self {
        Self {
            x: Vector2::zeros(),
            p: Matrix2::identity() * DIFFUSE_VARIANCE,
        }
    }
}

/// Predicted and filtered moments for every timepoint.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub filtered_means: Vec<Vector2<f64>>,
    pub filtered_covs: Vec<Matrix2<f64>>,
    pub predicted_means: Vec<Vector2<f64>>,
    pub predicted_covs: Vec<Matrix2<f64>>,
    pub loglik: f64,
}

impl FilterOutput {
    pub fn len(&self) -> usize {
        self.filtered_means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filtered_means.is_empty()
    }

    /// State-level imputation: predicted means at fully masked timepoints,
    /// filtered means elsewhere.
    pub fn state_estimates(&self, series: &MaskedSeries) -> Vec<Vector2<f64>> {
        (0..self.len())
            .map(|t| {
                let all_masked = (0..series.mask.ncols()).all(|c| series.mask[(t, c)]);
                if all_masked {
                    self.predicted_means[t]
                } else {
                    self.filtered_means[t]
                }
            })
            .collect()
    }
}

/// `x̄ = A x`, `P̄ = A P Aᵀ + Q`.
pub fn time_update(state: &FilterState, params: &ModelParams) -> FilterState {
    FilterState {
        x: params.a * state.x,
        p: symmetrize2(&(params.a * state.p * params.a.transpose() + params.q)),
    }
}

/// Measurement update on the observed subset of `z_row`; returns the updated
/// state and the Gaussian log-density of the observed entries.
///
/// Uses the Joseph-stabilised covariance form. `observed[i] == false` marks
/// indicator `i` as missing.
pub fn measurement_update(
    state: &FilterState,
    z_row: &[f64],
    observed: &[bool],
    params: &ModelParams,
) -> Result<(FilterState, f64)> {
    debug_assert_eq!(z_row.len(), N_INDICATORS);
    let idx: Vec<usize> = (0..N_INDICATORS).filter(|&i| observed[i]).collect();
    let k = idx.len();
    if k == 0 {
        return Ok((*state, 0.0));
    }
    let h = DMatrix::from_fn(k, 2, |r, c| params.h[(idx[r], c)]);
    let r_obs = DMatrix::from_diagonal(&DVector::from_iterator(k, idx.iter().map(|&i| params.r[i])));
    let p_bar = DMatrix::from_column_slice(2, 2, state.p.as_slice());
    let x_bar = DVector::from_column_slice(state.x.as_slice());
    let e = DVector::from_iterator(k, idx.iter().map(|&i| z_row[i])) - &h * &x_bar;

    let f = &h * &p_bar * h.transpose() + &r_obs;
    let chol = f.clone().cholesky().ok_or(Error::SingularInnovation(None))?;
    let f_inv_e = chol.solve(&e);
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let loglik = -0.5 * (k as f64 * LN_2PI + log_det + e.dot(&f_inv_e));

    // K = P̄ Hᵀ F⁻¹
    let gain = chol.solve(&(&h * &p_bar)).transpose();
    let x = &x_bar + &gain * &e;
    let i_kh = DMatrix::<f64>::identity(2, 2) - &gain * &h;
    let p = &i_kh * &p_bar * i_kh.transpose() + &gain * &r_obs * gain.transpose();

    let state = FilterState {
        x: Vector2::new(x[0], x[1]),
        p: symmetrize2(&Matrix2::new(p[(0, 0)], p[(0, 1)], p[(1, 0)], p[(1, 1)])),
    };
    Ok((state, loglik))
}

/// Runs the filter over the whole series starting from `init`, the state
/// distribution one step before the first observation.
pub fn filter_series(series: &MaskedSeries, params: &ModelParams, init: &FilterState) -> Result<FilterOutput> {
    let t_len = series.len();
    if t_len == 0 {
        return Err(Error::Empty("series"));
    }
    let mut out = FilterOutput {
        filtered_means: Vec::with_capacity(t_len),
        filtered_covs: Vec::with_capacity(t_len),
        predicted_means: Vec::with_capacity(t_len),
        predicted_covs: Vec::with_capacity(t_len),
        loglik: 0.0,
    };
    let mut state = *init;
    let mut z_row = [0.0; N_INDICATORS];
    let mut observed = [false; N_INDICATORS];
    for t in 0..t_len {
        let predicted = time_update(&state, params);
        for i in 0..N_INDICATORS {
            z_row[i] = series.z[(t, i)];
            observed[i] = !series.mask[(t, i)];
        }
        let (filtered, ll) = measurement_update(&predicted, &z_row, &observed, params)
            .map_err(|_| Error::SingularInnovation(Some(t)))?;
        out.predicted_means.push(predicted.x);
        out.predicted_covs.push(predicted.p);
        out.filtered_means.push(filtered.x);
        out.filtered_covs.push(filtered.p);
        out.loglik += ll;
        state = filtered;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_condition, simulate, Indicators, Loadings};

    fn params_1d() -> ModelParams {
        // one informative indicator loading 1 on state 1
        let mut h = Loadings::zeros();
        h[(0, 0)] = 1.0;
        ModelParams {
            a: Matrix2::zeros(),
            h,
            q: Matrix2::identity(),
            r: Indicators::repeat(1.0),
        }
    }

    #[test]
    fn time_update_identity_dynamics() {
        let p = ModelParams { a: Matrix2::identity(), ..params_1d() };
        let s = FilterState { x: Vector2::new(1.0, 2.0), p: Matrix2::identity() };
        let u = time_update(&s, &p);
        assert_eq!(u.x, Vector2::new(1.0, 2.0));
        assert_eq!(u.p, Matrix2::identity() * 2.0);
    }

    #[test]
    fn time_update_zero_dynamics() {
        let mut p = params_1d();
        p.q = Matrix2::new(2.0, 0.3, 0.3, 1.5);
        let s = FilterState { x: Vector2::new(1.0, 2.0), p: Matrix2::identity() * 4.0 };
        let u = time_update(&s, &p);
        assert_eq!(u.x, Vector2::zeros());
        assert_eq!(u.p, p.q);
    }

    #[test]
    fn time_update_cross_lagged() {
        let mut p = params_1d();
        p.a = Matrix2::new(0.7, 0.3, 0.0, 0.7);
        let s = FilterState { x: Vector2::new(1.0, 0.0), p: Matrix2::identity() };
        let u = time_update(&s, &p);
        assert!((u.x - Vector2::new(0.7, 0.0)).norm() < 1e-15);
        assert!((u.p - Matrix2::new(1.58, 0.21, 0.21, 1.49)).abs().max() < 1e-14);
    }

    #[test]
    fn fully_masked_row_is_identity() {
        let p = make_condition(0.25, 0.7, 0.3).unwrap();
        let s = FilterState { x: Vector2::new(0.3, -0.1), p: Matrix2::new(1.2, 0.1, 0.1, 0.9) };
        let (u, ll) = measurement_update(&s, &[9.0; 6], &[false; 6], &p).unwrap();
        assert_eq!(u, s);
        assert_eq!(ll, 0.0);
    }

    #[test]
    fn conjugate_scalar_update() {
        let p = params_1d();
        let s = FilterState { x: Vector2::zeros(), p: Matrix2::identity() };
        let mut obs = [false; 6];
        obs[0] = true;
        let (u, ll) = measurement_update(&s, &[2.0, 0.0, 0.0, 0.0, 0.0, 0.0], &obs, &p).unwrap();
        assert!((u.x[0] - 1.0).abs() < 1e-15);
        assert!((u.p[(0, 0)] - 0.5).abs() < 1e-15);
        // z ~ N(0, 2)
        let expect = -0.5 * (LN_2PI + 2.0_f64.ln() + 4.0 / 2.0);
        assert!((ll - expect).abs() < 1e-14);
    }

    #[test]
    fn singular_innovation_is_reported() {
        let mut p = params_1d();
        p.h = Loadings::zeros();
        p.r = Indicators::zeros();
        let s = FilterState { x: Vector2::zeros(), p: Matrix2::identity() };
        let err = measurement_update(&s, &[0.0; 6], &[true; 6], &p).unwrap_err();
        assert!(matches!(err, Error::SingularInnovation(_)));
    }

    #[test]
    fn all_masked_series_is_pure_prediction() {
        let p = make_condition(0.25, 0.7, 0.3).unwrap();
        let mut s = simulate(&p, 60, 1, 10).unwrap();
        s.mask.fill(true);
        let init = FilterState { x: Vector2::new(2.0, -1.0), p: Matrix2::zeros() };
        let out = filter_series(&s, &p, &init).unwrap();
        assert_eq!(out.loglik, 0.0);
        let sigma = stationary_covariance(&p).unwrap();
        let gap = |m: &Matrix2<f64>| (m - sigma).abs().max();
        assert!(gap(&out.predicted_covs[59]) < gap(&out.predicted_covs[5]));
        assert!(gap(&out.predicted_covs[59]) < 1e-6);
        assert_eq!(out.state_estimates(&s)[3], out.predicted_means[3]);
    }

    #[test]
    fn covariances_stay_psd_on_grid() {
        for &(s2, a, g) in &[(0.25, 0.7, 0.3), (0.75, 0.2, 0.0), (0.75, 0.7, 0.15)] {
            let p = make_condition(s2, a, g).unwrap();
            let s = simulate(&p, 200, 3, 10).unwrap();
            let s = crate::missingness::apply_mcar(&s, 0.3, 4).unwrap();
            let out = filter_series(&s, &p, &FilterState::stationary(&p).unwrap()).unwrap();
            for m in out.filtered_covs.iter().chain(&out.predicted_covs) {
                assert!((m[(0, 1)] - m[(1, 0)]).abs() <= 1e-10);
                let eig = m.symmetric_eigenvalues();
                assert!(eig.min() >= -1e-10);
            }
        }
    }
}
