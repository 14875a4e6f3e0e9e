//! Single imputation by EM under a multivariate Gaussian working model with a
//! time-varying mean.
//!
//! Each iteration refits the level (mean) model on the completed data,
//! re-estimates the residual covariance, and replaces masked entries by their
//! Gaussian conditional expectation.

pub mod arima;
pub mod spline;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::least_squares;
use crate::model::{MaskedSeries, BEEPS_PER_DAY};

pub use arima::{fit_arima, ArimaFit, ArimaOrder};

/// Minimum number of observed values per column.
pub const MIN_OBSERVED: usize = 10;
const RIDGE: f64 = 1e-8;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelModel {
    Arima,
    Spline,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub level_model: LevelModel,
    pub max_iter: usize,
    /// Convergence threshold on the largest change of any imputed value.
    pub tol: f64,
    pub arima_order: ArimaOrder,
    /// Spline basis size; `None` means two per ten days of data.
    pub spline_df: Option<usize>,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            level_model: LevelModel::Arima,
            max_iter: 100,
            tol: 1e-4,
            arima_order: ArimaOrder::default(),
            spline_df: None,
        }
    }
}

impl EmConfig {
    pub fn with_level_model(level_model: LevelModel) -> Self {
        Self { level_model, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("tol must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_spline_df(&self, t_len: usize) -> usize {
        self.spline_df
            .unwrap_or_else(|| 2 * t_len.div_ceil(BEEPS_PER_DAY) / 10)
            .max(2)
    }
}

fn column(z: &DMatrix<f64>, c: usize) -> Vec<f64> {
    z.column(c).iter().copied().collect()
}

/// Per-column level estimates for a fully completed matrix.
pub fn estimate_levels(z: &DMatrix<f64>, config: &EmConfig) -> DMatrix<f64> {
    let (t_len, n_col) = z.shape();
    let mut mu = DMatrix::zeros(t_len, n_col);
    for c in 0..n_col {
        let y = column(z, c);
        let col_mean = y.iter().sum::<f64>() / t_len.max(1) as f64;
        let fitted = match config.level_model {
            LevelModel::Arima => Some(fit_arima(&y, config.arima_order).fitted),
            LevelModel::Spline => spline::fit_spline(&y, config.effective_spline_df(t_len)),
            LevelModel::Regression => regression_levels(z, c),
        };
        match fitted {
            Some(f) => mu.column_mut(c).copy_from_slice(&f),
            None => {
                log::warn!("level model for column {} is singular; using the column mean", c + 1);
                mu.column_mut(c).fill(col_mean);
            }
        }
    }
    mu
}

/// OLS of column `c` on an intercept, linear time and the other columns.
fn regression_levels(z: &DMatrix<f64>, c: usize) -> Option<Vec<f64>> {
    let (t_len, n_col) = z.shape();
    let others: Vec<usize> = (0..n_col).filter(|&j| j != c).collect();
    let x = DMatrix::from_fn(t_len, 2 + others.len(), |t, k| match k {
        0 => 1.0,
        1 => t as f64 / t_len.max(1) as f64,
        k => z[(t, others[k - 2])],
    });
    let y = z.column(c).into_owned();
    let beta = least_squares(&x, &y)?;
    Some((x * beta).iter().copied().collect())
}

/// Conditional mean and covariance of the masked entries of one row.
struct Conditional {
    mean: Vec<f64>,
    cov: DMatrix<f64>,
    ridged: bool,
}

fn conditional(row: &[f64], missing: &[bool], mu: &[f64], sigma: &DMatrix<f64>) -> Conditional {
    let m: Vec<usize> = (0..row.len()).filter(|&i| missing[i]).collect();
    let o: Vec<usize> = (0..row.len()).filter(|&i| !missing[i]).collect();
    let s_mm = sigma.select_rows(&m).select_columns(&m);
    if o.is_empty() {
        return Conditional { mean: m.iter().map(|&i| mu[i]).collect(), cov: s_mm, ridged: false };
    }
    let s_oo = sigma.select_rows(&o).select_columns(&o);
    let s_mo = sigma.select_rows(&m).select_columns(&o);
    let (chol, ridged) = match s_oo.clone().cholesky() {
        Some(c) => (c, false),
        None => {
            let n = o.len();
            let ridge = s_oo + DMatrix::identity(n, n) * RIDGE;
            match ridge.cholesky() {
                Some(c) => (c, true),
                None => {
                    return Conditional {
                        mean: m.iter().map(|&i| mu[i]).collect(),
                        cov: s_mm,
                        ridged: true,
                    }
                }
            }
        }
    };
    let resid = nalgebra::DVector::from_iterator(o.len(), o.iter().map(|&i| row[i] - mu[i]));
    let shift = &s_mo * chol.solve(&resid);
    let cov = &s_mm - &s_mo * chol.solve(&s_mo.transpose());
    Conditional {
        mean: m.iter().enumerate().map(|(k, &i)| mu[i] + shift[k]).collect(),
        cov: crate::linalg::symmetrize(&cov),
        ridged,
    }
}

/// Replaces the masked entries of `row` by `μₘ + Σₘₒ Σₒₒ⁻¹ (zₒ − μₒ)`.
///
/// Returns the completed row and whether a ridge was needed on `Σₒₒ`.
pub fn em_conditional_fill(row: &[f64], missing: &[bool], mu: &[f64], sigma: &DMatrix<f64>) -> (Vec<f64>, bool) {
    let mut out = row.to_vec();
    if !missing.iter().any(|&m| m) {
        return (out, false);
    }
    let cond = conditional(row, missing, mu, sigma);
    for (k, i) in (0..row.len()).filter(|&i| missing[i]).enumerate() {
        out[i] = cond.mean[k];
    }
    (out, cond.ridged)
}

#[derive(Debug, Clone)]
pub struct EmResult {
    pub completed: DMatrix<f64>,
    pub iterations: usize,
    pub final_change: f64,
    pub converged: bool,
    /// Observed-data Gaussian log-likelihood under each iteration's working
    /// mean and covariance.
    pub objective: Vec<f64>,
    /// Set when any observed block needed a ridge.
    pub ridged: bool,
}

impl EmResult {
    pub fn to_series(&self, template: &MaskedSeries) -> MaskedSeries {
        template.with_completed(self.completed.clone())
    }
}

fn observed_loglik(z: &DMatrix<f64>, mask: &DMatrix<bool>, mu: &DMatrix<f64>, sigma: &DMatrix<f64>) -> f64 {
    let (t_len, n_col) = z.shape();
    let mut total = 0.0;
    let mut cache: Vec<(Vec<bool>, Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>)> = Vec::new();
    for t in 0..t_len {
        let pattern: Vec<bool> = (0..n_col).map(|c| mask[(t, c)]).collect();
        let o: Vec<usize> = (0..n_col).filter(|&c| !pattern[c]).collect();
        if o.is_empty() {
            continue;
        }
        let pos = match cache.iter().position(|(p, _)| *p == pattern) {
            Some(p) => p,
            None => {
                cache.push((pattern.clone(), sigma.select_rows(&o).select_columns(&o).cholesky()));
                cache.len() - 1
            }
        };
        let Some(chol) = &cache[pos].1 else {
            return f64::NEG_INFINITY;
        };
        let e = nalgebra::DVector::from_iterator(o.len(), o.iter().map(|&c| z[(t, c)] - mu[(t, c)]));
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        total -= 0.5 * (o.len() as f64 * LN_2PI + log_det + e.dot(&chol.solve(&e)));
    }
    total
}

/// Runs EM to convergence and returns the completed data.
///
/// The covariance step adds the conditional covariance of the imputed
/// entries, `Σ = (1/T) Σₜ [(zₜ − μₜ)(zₜ − μₜ)ᵀ + Cₜ]`, which makes the
/// iteration a proper EM when the level model is linear in fixed regressors.
pub fn em_impute(series: &MaskedSeries, config: &EmConfig) -> Result<EmResult> {
    config.validate()?;
    let t_len = series.len();
    let n_col = series.z.ncols();
    for c in 0..n_col {
        let observed = series.observed_count(c);
        if observed < MIN_OBSERVED.min(t_len) {
            return Err(Error::InsufficientObserved { column: c, observed, required: MIN_OBSERVED });
        }
    }

    let mut z = series.z.clone();
    for c in 0..n_col {
        let obs: Vec<f64> = (0..t_len).filter(|&t| !series.mask[(t, c)]).map(|t| series.z[(t, c)]).collect();
        let m = obs.iter().sum::<f64>() / obs.len() as f64;
        for t in 0..t_len {
            if series.mask[(t, c)] {
                z[(t, c)] = m;
            }
        }
    }
    let rows: Vec<usize> = (0..t_len).filter(|&t| (0..n_col).any(|c| series.mask[(t, c)])).collect();
    let mut cond_cov: Vec<Option<DMatrix<f64>>> = vec![None; t_len];

    let mut result = EmResult {
        completed: z.clone(),
        iterations: 0,
        final_change: 0.0,
        converged: false,
        objective: Vec::new(),
        ridged: false,
    };
    for iter in 1..=config.max_iter {
        let mu = estimate_levels(&z, config);
        let resid = &z - &mu;
        let mut sigma = resid.transpose() * &resid;
        for &t in &rows {
            if let Some(c) = &cond_cov[t] {
                let m: Vec<usize> = (0..n_col).filter(|&j| series.mask[(t, j)]).collect();
                for (a, &i) in m.iter().enumerate() {
                    for (b, &j) in m.iter().enumerate() {
                        sigma[(i, j)] += c[(a, b)];
                    }
                }
            }
        }
        sigma /= t_len as f64;

        let mut change: f64 = 0.0;
        for &t in &rows {
            let row: Vec<f64> = (0..n_col).map(|c| z[(t, c)]).collect();
            let missing: Vec<bool> = (0..n_col).map(|c| series.mask[(t, c)]).collect();
            let mu_row: Vec<f64> = (0..n_col).map(|c| mu[(t, c)]).collect();
            let cond = conditional(&row, &missing, &mu_row, &sigma);
            result.ridged |= cond.ridged;
            for (k, c) in (0..n_col).filter(|&c| missing[c]).enumerate() {
                change = change.max((z[(t, c)] - cond.mean[k]).abs());
                z[(t, c)] = cond.mean[k];
            }
            cond_cov[t] = Some(cond.cov);
        }
        result.objective.push(observed_loglik(&series.z, &series.mask, &mu, &sigma));
        result.iterations = iter;
        result.final_change = change;
        if change < config.tol {
            result.converged = true;
            break;
        }
    }
    if !result.converged {
        log::debug!("EM stopped after {} iterations (change {:.2e})", result.iterations, result.final_change);
    }
    result.completed = z;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::missingness::{apply_mcar, apply_spec, MissingnessSpec, Mechanism};
    use crate::model::{make_condition, simulate};
    use rand::Rng;

    fn partitioned_oracle(row: &[f64], missing: &[bool], mu: &[f64], sigma: &DMatrix<f64>) -> Vec<f64> {
        // explicit block inverse of the permuted covariance
        let m: Vec<usize> = (0..6).filter(|&i| missing[i]).collect();
        let o: Vec<usize> = (0..6).filter(|&i| !missing[i]).collect();
        let perm: Vec<usize> = m.iter().chain(&o).copied().collect();
        let s = sigma.select_rows(&perm).select_columns(&perm);
        let prec = s.try_inverse().unwrap();
        let k = m.len();
        let p_mm = prec.view((0, 0), (k, k)).into_owned();
        let p_mo = prec.view((0, k), (k, o.len())).into_owned();
        let d = nalgebra::DVector::from_iterator(o.len(), o.iter().map(|&i| row[i] - mu[i]));
        // μₘ − Λₘₘ⁻¹ Λₘₒ (zₒ − μₒ)
        let shift = -(p_mm.try_inverse().unwrap() * p_mo * d);
        let mut out = row.to_vec();
        for (a, &i) in m.iter().enumerate() {
            out[i] = mu[i] + shift[a];
        }
        out
    }

    #[test]
    fn fill_bivariate() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let (out, ridged) = em_conditional_fill(&[f64::NAN, 2.0], &[true, false], &[0.0, 0.0], &sigma);
        assert!((out[0] - 1.0).abs() < 1e-15);
        assert_eq!(out[1], 2.0);
        assert!(!ridged);
        let (same, _) = em_conditional_fill(&[0.3, 2.0], &[false, false], &[0.0, 0.0], &sigma);
        assert_eq!(same, vec![0.3, 2.0]);
    }

    #[test]
    fn fill_matches_partitioned_inverse() {
        let mut rng = crate::seed::rng_from_seed(12);
        for _ in 0..20 {
            let a = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
            let sigma = &a * a.transpose() + DMatrix::identity(6, 6) * 0.1;
            let row: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mu: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let missing = [true, false, true, false, false, true];
            let (fill, _) = em_conditional_fill(&row, &missing, &mu, &sigma);
            let oracle = partitioned_oracle(&row, &missing, &mu, &sigma);
            for i in 0..6 {
                assert!((fill[i] - oracle[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn singular_observed_block_uses_ridge() {
        let sigma = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.5, 0.5, 1.0, 1.0, 0.5, 1.0, 1.0]);
        let (out, ridged) = em_conditional_fill(&[0.0, 1.0, 1.0], &[true, false, false], &[0.0; 3], &sigma);
        assert!(ridged);
        assert!(out[0].is_finite());
    }

    #[test]
    fn levels_of_constant_column() {
        let z = DMatrix::from_fn(100, 6, |t, c| if c == 2 { 3.0 } else { ((t * (c + 1)) as f64).sin() });
        for lm in [LevelModel::Arima, LevelModel::Spline, LevelModel::Regression] {
            let mu = estimate_levels(&z, &EmConfig::with_level_model(lm));
            assert!(mu.column(2).iter().all(|v| (v - 3.0).abs() < 1e-8), "{lm:?}");
        }
    }

    #[test]
    fn spline_default_df() {
        assert_eq!(EmConfig::default().effective_spline_df(500), 10);
        assert_eq!(EmConfig::default().effective_spline_df(30), 2);
    }

    #[test]
    fn unmasked_series_is_unchanged() {
        let p = make_condition(0.25, 0.7, 0.0).unwrap();
        let s = simulate(&p, 200, 1, 10).unwrap();
        let r = em_impute(&s, &EmConfig::default()).unwrap();
        assert_eq!(r.completed, s.z);
        assert_eq!(r.iterations, 1);
        assert!(r.converged);
    }

    #[test]
    fn single_cell_two_columns() {
        let mut rng = crate::seed::rng_from_seed(4);
        let n = 200;
        let mut z = DMatrix::zeros(n, 2);
        for t in 0..n {
            let a: f64 = rng.sample(rand_distr::StandardNormal);
            let b: f64 = rng.sample(rand_distr::StandardNormal);
            z[(t, 0)] = a;
            z[(t, 1)] = 0.9 * a + (1.0 - 0.81_f64).sqrt() * b;
        }
        let mut s = MaskedSeries::from_observations(z);
        s.mask[(50, 0)] = true;
        let cfg = EmConfig {
            level_model: LevelModel::Spline,
            spline_df: Some(2),
            tol: 1e-12,
            max_iter: 1000,
            ..Default::default()
        };
        let r = em_impute(&s, &cfg).unwrap();
        assert!(r.converged);
        // the correction only enters Σ₀₀, so the fixed point regresses the
        // masked cell on its partner with slope S₀₁/S₁₁ of the residual
        // cross-products at convergence
        let mu = estimate_levels(&r.completed, &cfg);
        let resid = &r.completed - &mu;
        let cross = resid.transpose() * &resid;
        let oracle = mu[(50, 0)] + cross[(0, 1)] / cross[(1, 1)] * (r.completed[(50, 1)] - mu[(50, 1)]);
        assert!((r.completed[(50, 0)] - oracle).abs() < 1e-6);
    }

    #[test]
    fn observed_entries_never_change() {
        let p = make_condition(0.25, 0.7, 0.15).unwrap();
        let s = simulate(&p, 300, 2, 10).unwrap();
        let s = apply_mcar(&s, 0.3, 3).unwrap();
        for lm in [LevelModel::Arima, LevelModel::Spline, LevelModel::Regression] {
            let r = em_impute(&s, &EmConfig::with_level_model(lm)).unwrap();
            for t in 0..300 {
                for c in 0..6 {
                    if !s.mask[(t, c)] {
                        assert_eq!(r.completed[(t, c)], s.z[(t, c)]);
                    }
                }
            }
        }
    }

    #[test]
    fn spline_objective_is_monotone() {
        let p = make_condition(0.25, 0.7, 0.3).unwrap();
        for seed in 0..20 {
            let s = simulate(&p, 300, seed, 10).unwrap();
            let spec = MissingnessSpec::preset(Mechanism::Mar, 0.3).unwrap();
            let s = apply_spec(&s, &spec, seed + 100).unwrap();
            let r = em_impute(&s, &EmConfig::with_level_model(LevelModel::Spline)).unwrap();
            for w in r.objective.windows(2) {
                assert!(w[1] >= w[0] - 1e-6 * w[0].abs(), "seed {seed}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn too_few_observed_is_an_error() {
        let p = make_condition(0.25, 0.7, 0.0).unwrap();
        let mut s = simulate(&p, 50, 1, 10).unwrap();
        for t in 0..45 {
            s.mask[(t, 1)] = true;
        }
        assert!(matches!(
            em_impute(&s, &EmConfig::default()),
            Err(Error::InsufficientObserved { column: 1, .. })
        ));
    }
}
