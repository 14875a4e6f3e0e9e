//! Multiple imputation by chained equations with predictive mean matching,
//! and Rubin's rules for pooling fits across imputations.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::FitResult;
use crate::model::MaskedSeries;
use crate::seed::{derive_seed, rng_from_seed, stage};

/// Minimum number of observed values in an imputed column.
pub const MIN_OBSERVED: usize = 10;
const RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiceVariant {
    /// Same-timepoint predictors only.
    Def,
    /// Same-timepoint predictors plus every column at the previous timepoint.
    Lag1,
}

/// Same-timepoint columns used to predict an imputed column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SameTimePredictors {
    None,
    /// Columns without masked entries.
    Complete,
    /// Every other column, including other imputed ones at their current
    /// chain values.
    AllOthers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiceConfig {
    pub variant: MiceVariant,
    pub m: usize,
    pub chain_iters: usize,
    pub donors: usize,
    /// Same-timepoint predictor set; `AllOthers` unless set.
    pub same_time: Option<SameTimePredictors>,
}

impl Default for MiceConfig {
    fn default() -> Self {
        Self { variant: MiceVariant::Def, m: 10, chain_iters: 5, donors: 5, same_time: None }
    }
}

impl MiceConfig {
    pub fn with_variant(variant: MiceVariant) -> Self {
        Self { variant, ..Self::default() }
    }

    pub fn same_time_predictors(&self) -> SameTimePredictors {
        self.same_time.unwrap_or(SameTimePredictors::AllOthers)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::InvalidArgument("m must be at least 2".into()));
        }
        if self.donors == 0 {
            return Err(Error::InvalidArgument("donors must be at least 1".into()));
        }
        Ok(())
    }
}

/// How the regression coefficients for the missing cases are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoefficientDraw {
    /// Posterior draw of `σ²` and `β̇` (the imputation default).
    Posterior,
    /// `β̇ = β̂`; deterministic apart from donor selection.
    PointEstimate,
}

fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols() + 1, |r, c| if c == 0 { 1.0 } else { x[(r, c - 1)] })
}

/// Predictive mean matching for one column.
///
/// `x_obs`/`x_mis` exclude the intercept, which is added here. Each missing
/// case receives the observed `y` of a donor drawn uniformly from the
/// `donors` observed cases whose `x β̂` is nearest its `x β̇`.
pub fn pmm_impute_column(
    y_obs: &[f64],
    x_obs: &DMatrix<f64>,
    x_mis: &DMatrix<f64>,
    donors: usize,
    draw: CoefficientDraw,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let n = y_obs.len();
    let xo = with_intercept(x_obs);
    let xm = with_intercept(x_mis);
    let p = xo.ncols();
    if x_obs.nrows() != n || x_mis.ncols() != x_obs.ncols() {
        return Err(Error::InvalidArgument("predictor shapes do not match".into()));
    }
    if n <= p + 2 {
        return Err(Error::InvalidArgument(format!("{n} observed cases for {p} coefficients")));
    }
    if donors == 0 {
        return Err(Error::InvalidArgument("donors must be at least 1".into()));
    }
    if xm.nrows() == 0 {
        return Ok(Vec::new());
    }

    let y = DVector::from_column_slice(y_obs);
    let xtx = xo.transpose() * &xo;
    let xty = xo.transpose() * &y;
    let chol = match xtx.clone().cholesky() {
        Some(c) if c.l().diagonal().min() > 1e-7 * c.l().diagonal().max() => c,
        _ => {
            log::warn!("predictor matrix is rank deficient; adding a ridge");
            let ridge = DMatrix::from_diagonal(&xtx.diagonal().map(|d| RIDGE * d.max(1.0)));
            (xtx + ridge)
                .cholesky()
                .ok_or_else(|| Error::InvalidArgument("predictor matrix is singular".into()))?
        }
    };
    let beta_hat = chol.solve(&xty);
    let beta_dot = match draw {
        CoefficientDraw::PointEstimate => beta_hat.clone(),
        CoefficientDraw::Posterior => {
            let resid = &y - &xo * &beta_hat;
            let df = (n - p) as f64;
            let chi: f64 = ChiSquared::new(df).expect("positive df").sample(rng);
            let sigma = (resid.norm_squared() / chi).sqrt();
            // β̇ = β̂ + σ̇ L⁻ᵀ u with V = (XᵀX)⁻¹ = L⁻ᵀL⁻¹
            let u = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let v = chol.l().transpose().solve_upper_triangular(&u).expect("non-singular factor");
            &beta_hat + v * sigma
        }
    };

    let yhat_obs = &xo * &beta_hat;
    let yhat_mis = &xm * &beta_dot;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| yhat_obs[a].total_cmp(&yhat_obs[b]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| yhat_obs[i]).collect();
    let k = donors.min(n);

    let mut out = Vec::with_capacity(yhat_mis.len());
    let mut pool = Vec::with_capacity(k);
    for &target in yhat_mis.iter() {
        // grow a window of the k nearest around the insertion point
        let mut hi = sorted.partition_point(|&v| v < target);
        let mut lo = hi;
        pool.clear();
        while pool.len() < k {
            let take_left = match (lo > 0, hi < n) {
                (true, true) => (target - sorted[lo - 1]) <= (sorted[hi] - target),
                (true, false) => true,
                (false, true) => false,
                (false, false) => break,
            };
            if take_left {
                lo -= 1;
                pool.push(order[lo]);
            } else {
                pool.push(order[hi]);
                hi += 1;
            }
        }
        let pick = pool[rng.random_range(0..pool.len())];
        out.push(y_obs[pick]);
    }
    Ok(out)
}

/// Completed datasets from independent chains.
#[derive(Debug, Clone)]
pub struct ImputationSet {
    pub datasets: Vec<DMatrix<f64>>,
    pub seeds: Vec<u64>,
}

impl ImputationSet {
    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }

    pub fn series(&self, i: usize, template: &MaskedSeries) -> MaskedSeries {
        template.with_completed(self.datasets[i].clone())
    }
}

fn predictors(z: &DMatrix<f64>, variant: MiceVariant, same_time: &[usize], rows: &[usize]) -> DMatrix<f64> {
    let n_lag = if variant == MiceVariant::Lag1 { z.ncols() } else { 0 };
    let means: Vec<f64> = if n_lag > 0 {
        (0..z.ncols()).map(|c| z.column(c).sum() / z.nrows() as f64).collect()
    } else {
        Vec::new()
    };
    DMatrix::from_fn(rows.len(), same_time.len() + n_lag, |r, k| {
        let t = rows[r];
        if k < same_time.len() {
            z[(t, same_time[k])]
        } else if t == 0 {
            means[k - same_time.len()]
        } else {
            z[(t - 1, k - same_time.len())]
        }
    })
}

fn run_chain(series: &MaskedSeries, config: &MiceConfig, targets: &[usize], complete: &[usize], seed: u64) -> Result<DMatrix<f64>> {
    let mut rng = rng_from_seed(seed);
    let t_len = series.len();
    let mut z = series.z.clone();
    for &c in targets {
        let obs: Vec<f64> = (0..t_len).filter(|&t| !series.mask[(t, c)]).map(|t| series.z[(t, c)]).collect();
        for t in 0..t_len {
            if series.mask[(t, c)] {
                z[(t, c)] = obs[rng.random_range(0..obs.len())];
            }
        }
    }
    let same_time: Vec<Vec<usize>> = targets
        .iter()
        .map(|&c| match config.same_time_predictors() {
            SameTimePredictors::None => Vec::new(),
            SameTimePredictors::Complete => complete.to_vec(),
            SameTimePredictors::AllOthers => (0..z.ncols()).filter(|&j| j != c).collect(),
        })
        .collect();
    for _ in 0..config.chain_iters {
        for (k, &c) in targets.iter().enumerate() {
            let obs_rows: Vec<usize> = (0..t_len).filter(|&t| !series.mask[(t, c)]).collect();
            let mis_rows: Vec<usize> = (0..t_len).filter(|&t| series.mask[(t, c)]).collect();
            let y_obs: Vec<f64> = obs_rows.iter().map(|&t| series.z[(t, c)]).collect();
            let x_obs = predictors(&z, config.variant, &same_time[k], &obs_rows);
            let x_mis = predictors(&z, config.variant, &same_time[k], &mis_rows);
            let imputed = pmm_impute_column(&y_obs, &x_obs, &x_mis, config.donors, CoefficientDraw::Posterior, &mut rng)?;
            for (&t, v) in mis_rows.iter().zip(imputed) {
                z[(t, c)] = v;
            }
        }
    }
    Ok(z)
}

/// Runs `config.m` independent chains over the columns that contain masked
/// entries.
pub fn mice_chain(series: &MaskedSeries, config: &MiceConfig, seed: u64) -> Result<ImputationSet> {
    config.validate()?;
    let n_col = series.z.ncols();
    let targets: Vec<usize> = (0..n_col).filter(|&c| series.observed_count(c) < series.len()).collect();
    let complete: Vec<usize> = (0..n_col).filter(|c| !targets.contains(c)).collect();
    for &c in &targets {
        let observed = series.observed_count(c);
        if observed < MIN_OBSERVED {
            return Err(Error::InsufficientObserved { column: c, observed, required: MIN_OBSERVED });
        }
    }
    let seeds: Vec<u64> = (0..config.m).map(|k| derive_seed(seed, &[stage::MICE, k as u64])).collect();
    let datasets = seeds
        .iter()
        .map(|&s| run_chain(series, config, &targets, &complete, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImputationSet { datasets, seeds })
}

/// Rubin's combining rules for one scalar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimate {
    pub q_bar: f64,
    /// Mean within-imputation variance; `None` if any fit lacked an SE.
    pub u_bar: Option<f64>,
    pub b_m: f64,
    pub t_var: Option<f64>,
}

impl PooledEstimate {
    /// Pools point estimates `q` and within variances `u` (squared SEs).
    pub fn from_draws(q: &[f64], u: &[Option<f64>]) -> Result<Self> {
        let m = q.len();
        if m < 2 {
            return Err(Error::InvalidArgument("pooling needs at least two fits".into()));
        }
        let sorted_sum = |mut v: Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v.iter().sum::<f64>()
        };
        // shifted mean: identical draws give back the draw itself, so B is exactly 0
        let lo = q.iter().copied().fold(f64::INFINITY, f64::min);
        let q_bar = lo + sorted_sum(q.iter().map(|x| x - lo).collect()) / m as f64;
        let b_m = sorted_sum(q.iter().map(|x| (x - q_bar).powi(2)).collect()) / (m - 1) as f64;
        let u_bar = u
            .iter()
            .copied()
            .collect::<Option<Vec<f64>>>()
            .map(|v| sorted_sum(v) / m as f64);
        let t_var = u_bar.map(|ub| ub + (m as f64 + 1.0) / m as f64 * b_m);
        Ok(Self { q_bar, u_bar, b_m, t_var })
    }

    pub fn se(&self) -> Option<f64> {
        self.t_var.map(f64::sqrt)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PooledFit {
    pub names: Vec<String>,
    pub estimates: Vec<PooledEstimate>,
    pub m: usize,
    /// All contributing fits converged.
    pub converged: bool,
}

impl PooledFit {
    pub fn get(&self, name: &str) -> Option<&PooledEstimate> {
        self.names.iter().position(|n| n == name).map(|i| &self.estimates[i])
    }
}

/// Pools the reported parameters of `fits` by Rubin's rules.
pub fn rubin_pool(fits: &[FitResult]) -> Result<PooledFit> {
    let first = fits.first().ok_or(Error::Empty("fits"))?;
    let names: Vec<String> = first.derived.iter().map(|p| p.name.clone()).collect();
    for f in fits {
        if f.derived.len() != names.len() || f.derived.iter().zip(&names).any(|(p, n)| &p.name != n) {
            return Err(Error::InvalidArgument("fits cover different parameter sets".into()));
        }
    }
    let estimates = (0..names.len())
        .map(|i| {
            let q: Vec<f64> = fits.iter().map(|f| f.derived[i].estimate).collect();
            let u: Vec<Option<f64>> = fits.iter().map(|f| f.derived[i].se.map(|s| s * s)).collect();
            PooledEstimate::from_draws(&q, &u)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PooledFit { names, estimates, m: fits.len(), converged: fits.iter().all(|f| f.converged) })
}
