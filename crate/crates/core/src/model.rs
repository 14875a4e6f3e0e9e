//! The two-state, six-indicator linear Gaussian state-space model and its
//! simulator.
//!
//! States evolve as `x_{t+1} = A x_t + v_t`, `v_t ~ N(0, Q)` and are observed
//! through `z_t = H x_t + w_t`, `w_t ~ N(0, R)` with `R` diagonal. Indicators
//! 1–3 load on state 1 only, indicators 4–6 on state 2 only.

use nalgebra::{DMatrix, Matrix2, SMatrix, SVector, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{solve_discrete_lyapunov2, spectral_radius2};
use crate::seed::rng_from_seed;

pub const N_STATES: usize = 2;
pub const N_INDICATORS: usize = 6;
/// Beeps per simulated day.
pub const BEEPS_PER_DAY: usize = 10;
/// Default number of discarded warm-up steps.
pub const DEFAULT_BURN_IN: usize = 100;

pub type Loadings = SMatrix<f64, N_INDICATORS, N_STATES>;
pub type Indicators = SVector<f64, N_INDICATORS>;

/// State the indicator `i` loads on under the block design.
#[inline]
pub fn block_of(indicator: usize) -> usize {
    if indicator < 3 {
        0
    } else {
        1
    }
}

/// Full parameterisation of the measurement and transition equations.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Transition coefficients.
    pub a: Matrix2<f64>,
    /// Factor loadings (6×2).
    pub h: Loadings,
    /// State-noise covariance.
    pub q: Matrix2<f64>,
    /// Diagonal of the measurement-error covariance.
    pub r: Indicators,
}

impl ModelParams {
    pub fn new(a: Matrix2<f64>, h: Loadings, q: Matrix2<f64>, r: Indicators) -> Result<Self> {
        let p = Self { a, h, q, r };
        p.validate()?;
        Ok(p)
    }

    /// Checks stationarity, covariance validity and the loading block pattern.
    pub fn validate(&self) -> Result<()> {
        let rho = spectral_radius2(&self.a);
        if !(rho < 1.0) {
            return Err(Error::NonStationary(rho));
        }
        if (self.q[(0, 1)] - self.q[(1, 0)]).abs() > 1e-12 {
            return Err(Error::InvalidParams("Q is not symmetric".into()));
        }
        let det = self.q.determinant();
        if self.q[(0, 0)] < 0.0 || self.q[(1, 1)] < 0.0 || det < -1e-12 {
            return Err(Error::InvalidParams("Q is not positive semi-definite".into()));
        }
        if self.r.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidParams("R has a negative or NaN variance".into()));
        }
        for i in 0..N_INDICATORS {
            let off = 1 - block_of(i);
            if self.h[(i, off)] != 0.0 {
                return Err(Error::InvalidParams(format!(
                    "loading of indicator {} on state {} must be zero",
                    i + 1,
                    off + 1
                )));
            }
        }
        Ok(())
    }

    /// Measurement-error covariance as a dense matrix.
    pub fn r_matrix(&self) -> SMatrix<f64, N_INDICATORS, N_INDICATORS> {
        SMatrix::from_diagonal(&self.r)
    }
}

/// Builds the data-generating parameters for one experimental condition.
///
/// `A = [[alpha, gamma], [0, alpha]]`, `Q = I`, every error variance equals
/// `sigma2` and every non-zero loading equals `sqrt(1 - sigma2)`.
pub fn make_condition(sigma2: f64, alpha: f64, gamma: f64) -> Result<ModelParams> {
    if !(sigma2 > 0.0 && sigma2 < 1.0) {
        return Err(Error::InvalidCondition(format!(
            "sigma2 = {sigma2} must lie in (0, 1)"
        )));
    }
    if !is_grid_condition(sigma2, alpha, gamma) {
        log::debug!("condition ({sigma2}, {alpha}, {gamma}) is outside the reference grid");
    }
    let lambda = (1.0 - sigma2).sqrt();
    let mut h = Loadings::zeros();
    for i in 0..N_INDICATORS {
        h[(i, block_of(i))] = lambda;
    }
    ModelParams::new(
        Matrix2::new(alpha, gamma, 0.0, alpha),
        h,
        Matrix2::identity(),
        Indicators::repeat(sigma2),
    )
    .map_err(|e| Error::InvalidCondition(e.to_string()))
}

/// True when the triple lies on the 2 × 2 × 3 reference grid.
pub fn is_grid_condition(sigma2: f64, alpha: f64, gamma: f64) -> bool {
    let near = |v: f64, set: &[f64]| set.iter().any(|s| (v - s).abs() < 1e-12);
    near(sigma2, &[0.25, 0.75]) && near(alpha, &[0.2, 0.7]) && near(gamma, &[0.0, 0.15, 0.3])
}

/// Stationary state covariance, the solution of `S = A S Aᵀ + Q`.
pub fn stationary_covariance(params: &ModelParams) -> Result<Matrix2<f64>> {
    solve_discrete_lyapunov2(&params.a, &params.q)
}

/// Latent states, one row per timepoint.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    pub x: DMatrix<f64>,
}

impl LatentTrajectory {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

/// Observations with a missingness mask (`true` = missing).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSeries {
    /// T×6 observation matrix. Masked cells keep their simulated value so the
    /// complete-data fit and the masked analyses share one raw draw.
    pub z: DMatrix<f64>,
    pub mask: DMatrix<bool>,
    pub truth: Option<LatentTrajectory>,
    /// Beep within day, cycling 1..=10.
    pub day_index: Vec<u8>,
}

impl MaskedSeries {
    /// Wraps a fully observed matrix.
    pub fn from_observations(z: DMatrix<f64>) -> Self {
        let t = z.nrows();
        let cols = z.ncols();
        Self {
            z,
            mask: DMatrix::from_element(t, cols, false),
            truth: None,
            day_index: day_indices(t),
        }
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    #[inline]
    pub fn is_missing(&self, t: usize, col: usize) -> bool {
        self.mask[(t, col)]
    }

    pub fn any_masked(&self) -> bool {
        self.mask.iter().any(|&m| m)
    }

    /// Number of timepoints with at least one masked indicator.
    pub fn masked_rows(&self) -> usize {
        (0..self.len())
            .filter(|&t| (0..self.mask.ncols()).any(|c| self.mask[(t, c)]))
            .count()
    }

    pub fn observed_count(&self, col: usize) -> usize {
        self.mask.column(col).iter().filter(|&&m| !m).count()
    }

    /// Same observations with the mask cleared.
    pub fn unmasked(&self) -> Self {
        let mut s = self.clone();
        s.mask.fill(false);
        s
    }

    /// Replaces the observation matrix and clears the mask; used to wrap an
    /// imputed dataset.
    pub fn with_completed(&self, z: DMatrix<f64>) -> Self {
        let mut s = Self::from_observations(z);
        s.truth = self.truth.clone();
        s.day_index = self.day_index.clone();
        s
    }
}

/// Beep-within-day index for `t` consecutive timepoints.
pub fn day_indices(t: usize) -> Vec<u8> {
    (0..t).map(|i| (i % BEEPS_PER_DAY) as u8 + 1).collect()
}

/// Simulates `t` timepoints from the stationary model.
///
/// The initial state is drawn from `N(0, S)` with `S` the stationary
/// covariance, then `burn_in` transitions are discarded.
pub fn simulate(params: &ModelParams, t: usize, seed: u64, burn_in: usize) -> Result<MaskedSeries> {
    if t == 0 {
        return Err(Error::InvalidArgument("T must be positive".into()));
    }
    let sigma = stationary_covariance(params)?;
    let chol0 = cholesky2(&sigma);
    let chol_q = cholesky2(&params.q);
    let mut rng = rng_from_seed(seed);
    let normal2 = |rng: &mut rand_chacha::ChaCha8Rng| {
        Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    };

    let mut x = chol0 * normal2(&mut rng);
    for _ in 0..burn_in {
        x = params.a * x + chol_q * normal2(&mut rng);
    }

    let sd: Indicators = params.r.map(|v| v.sqrt());
    let mut states = DMatrix::zeros(t, N_STATES);
    let mut z = DMatrix::zeros(t, N_INDICATORS);
    for step in 0..t {
        x = params.a * x + chol_q * normal2(&mut rng);
        states[(step, 0)] = x[0];
        states[(step, 1)] = x[1];
        let mean = params.h * x;
        for i in 0..N_INDICATORS {
            let w: f64 = rng.sample(StandardNormal);
            z[(step, i)] = mean[i] + sd[i] * w;
        }
    }

    let mut series = MaskedSeries::from_observations(z);
    series.truth = Some(LatentTrajectory { x: states });
    Ok(series)
}

/// Lower Cholesky factor of a 2×2 PSD matrix, tolerating singular input.
fn cholesky2(m: &Matrix2<f64>) -> Matrix2<f64> {
    let l11 = m[(0, 0)].max(0.0).sqrt();
    let l21 = if l11 > 0.0 { m[(1, 0)] / l11 } else { 0.0 };
    let l22 = (m[(1, 1)] - l21 * l21).max(0.0).sqrt();
    Matrix2::new(l11, 0.0, l21, l22)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_var(v: impl Iterator<Item = f64> + Clone) -> (f64, usize) {
        let n = v.clone().count();
        let mean = v.clone().sum::<f64>() / n as f64;
        (v.map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0), n)
    }

    #[test]
    fn condition_low_error() {
        let p = make_condition(0.25, 0.2, 0.0).unwrap();
        for i in 0..6 {
            let l = p.h[(i, block_of(i))];
            assert!((l * l - 0.75).abs() < 1e-15);
            assert!((l - 0.866_025_403_784_438_6).abs() < 1e-15);
            assert_eq!(p.h[(i, 1 - block_of(i))], 0.0);
        }
        assert_eq!(p.q, Matrix2::identity());
    }

    #[test]
    fn condition_high_error_strong_crosslag() {
        let p = make_condition(0.75, 0.7, 0.3).unwrap();
        assert_eq!(p.a, Matrix2::new(0.7, 0.3, 0.0, 0.7));
        assert!(p.r.iter().all(|&v| v == 0.75));
    }

    #[test]
    fn condition_rejects_bad_sigma2() {
        assert!(matches!(make_condition(1.0, 0.2, 0.0), Err(Error::InvalidCondition(_))));
        assert!(matches!(make_condition(0.0, 0.2, 0.0), Err(Error::InvalidCondition(_))));
        assert!(make_condition(0.5, 0.3, 0.1).is_ok());
    }

    #[test]
    fn grid_points_have_psd_stationary_covariance() {
        for &s2 in &[0.25, 0.75] {
            for &a in &[0.2, 0.7] {
                for &g in &[0.0, 0.15, 0.3] {
                    let s = stationary_covariance(&make_condition(s2, a, g).unwrap()).unwrap();
                    assert!(s[(0, 0)] > 0.0 && s[(1, 1)] > 0.0 && s.determinant() > 0.0);
                }
            }
        }
    }

    #[test]
    fn pure_measurement_noise() {
        let p = ModelParams {
            a: Matrix2::zeros(),
            h: Loadings::zeros(),
            q: Matrix2::identity(),
            r: Indicators::repeat(1.0),
        };
        let s = simulate(&p, 20_000, 3, 0).unwrap();
        for c in 0..6 {
            let (v, n) = sample_var(s.z.column(c).iter().copied());
            // sd of a sample variance of N(0,1) is sqrt(2/(n-1))
            assert!((v - 1.0).abs() < 3.0 * (2.0 / (n as f64 - 1.0)).sqrt(), "{v}");
        }
    }

    #[test]
    fn state_variance_matches_stationary() {
        let p = make_condition(0.25, 0.7, 0.0).unwrap();
        let s = simulate(&p, 50_000, 11, DEFAULT_BURN_IN).unwrap();
        let x = &s.truth.as_ref().unwrap().x;
        let (v, _) = sample_var(x.column(0).iter().copied());
        // AR(1) sample variance has inflated MC error, ~sqrt(2(1+φ²)/(1-φ²)/n) relative
        assert!((v - 1.960_784).abs() < 0.08, "{v}");
    }

    #[test]
    fn deterministic_given_seed() {
        let p = make_condition(0.75, 0.2, 0.15).unwrap();
        let a = simulate(&p, 300, 42, 100).unwrap();
        let b = simulate(&p, 300, 42, 100).unwrap();
        assert_eq!(a, b);
        let c = simulate(&p, 300, 43, 100).unwrap();
        assert_ne!(a.z, c.z);
    }

    #[test]
    fn day_index_cycles_with_partial_last_day() {
        let d = day_indices(23);
        assert_eq!(&d[..11], &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 1]);
        assert_eq!(d[22], 3);
    }

    #[test]
    fn residuals_match_r_and_lag_covariance_matches_a_sigma() {
        let p = make_condition(0.25, 0.7, 0.3).unwrap();
        let t = 40_000;
        let s = simulate(&p, t, 5, 100).unwrap();
        let x = &s.truth.as_ref().unwrap().x;
        for i in 0..6 {
            let b = block_of(i);
            let res: Vec<f64> = (0..t).map(|k| s.z[(k, i)] - p.h[(i, b)] * x[(k, b)]).collect();
            let (v, _) = sample_var(res.iter().copied());
            assert!((v - 0.25).abs() < 0.02, "{v}");
        }
        let sigma = stationary_covariance(&p).unwrap();
        let expect = p.a * sigma;
        for r in 0..2 {
            for c in 0..2 {
                let cov: f64 = (1..t).map(|k| x[(k, r)] * x[(k - 1, c)]).sum::<f64>() / (t - 1) as f64;
                assert!((cov - expect[(r, c)]).abs() < 0.1, "{r}{c}: {cov} vs {}", expect[(r, c)]);
            }
        }
    }
}
