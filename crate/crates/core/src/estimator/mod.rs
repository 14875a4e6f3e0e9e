//! Maximum-likelihood estimation of the constrained two-state model.
//!
//! Free parameters are the two autoregressive coefficients, the cross-lagged
//! effect of state 2 on state 1 (optionally also state 1 on state 2), six
//! loadings and six log error variances. `Q` is fixed at the identity.

pub mod bfgs;
pub(crate) mod likelihood;

use nalgebra::{DMatrix, DVector, Matrix2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::spectral_radius2;
use crate::model::{block_of, Indicators, Loadings, MaskedSeries, ModelParams, N_INDICATORS};
use crate::seed::{derive_seed, rng_from_seed, stage};

pub use bfgs::{BfgsOptions, BfgsResult};
pub use likelihood::Initialization;
use likelihood::{Direction, PreparedSeries};

/// Objective value returned where the likelihood is undefined.
pub const PENALTY: f64 = 1e10;

/// Names of the reported parameters, in record order.
pub const REPORTED_NAMES: [&str; 16] = [
    "alpha11", "alpha22", "gamma12", "gamma21", "lambda2_1", "lambda2_2", "lambda2_3", "lambda2_4",
    "lambda2_5", "lambda2_6", "sigma2_1", "sigma2_2", "sigma2_3", "sigma2_4", "sigma2_5", "sigma2_6",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub alpha11: f64,
    pub alpha22: f64,
    pub gamma12: f64,
    /// Effect of state 1 on state 2; held at zero unless freed.
    pub gamma21: f64,
    pub lambda: [f64; N_INDICATORS],
    pub logvar: [f64; N_INDICATORS],
}

impl ParamVector {
    /// Number of free coordinates.
    pub fn n_free(free_gamma21: bool) -> usize {
        if free_gamma21 {
            16
        } else {
            15
        }
    }

    pub fn from_model(p: &ModelParams) -> Self {
        let mut lambda = [0.0; N_INDICATORS];
        let mut logvar = [0.0; N_INDICATORS];
        for i in 0..N_INDICATORS {
            lambda[i] = p.h[(i, block_of(i))];
            logvar[i] = p.r[i].ln();
        }
        Self {
            alpha11: p.a[(0, 0)],
            alpha22: p.a[(1, 1)],
            gamma12: p.a[(0, 1)],
            gamma21: p.a[(1, 0)],
            lambda,
            logvar,
        }
    }

    /// Unpacks into model matrices without a stationarity check.
    pub fn to_model(&self) -> ModelParams {
        let mut h = Loadings::zeros();
        for i in 0..N_INDICATORS {
            h[(i, block_of(i))] = self.lambda[i];
        }
        ModelParams {
            a: Matrix2::new(self.alpha11, self.gamma12, self.gamma21, self.alpha22),
            h,
            q: Matrix2::identity(),
            r: Indicators::from_fn(|i, _| self.logvar[i].exp()),
        }
    }

    pub fn free_values(&self, free_gamma21: bool) -> DVector<f64> {
        let mut v = vec![self.alpha11, self.alpha22, self.gamma12];
        if free_gamma21 {
            v.push(self.gamma21);
        }
        v.extend_from_slice(&self.lambda);
        v.extend_from_slice(&self.logvar);
        DVector::from_vec(v)
    }

    /// Inverse of [`free_values`](Self::free_values); `gamma21` is zero when fixed.
    pub fn from_free(v: &DVector<f64>, free_gamma21: bool) -> Self {
        let off = if free_gamma21 { 4 } else { 3 };
        let mut lambda = [0.0; N_INDICATORS];
        let mut logvar = [0.0; N_INDICATORS];
        lambda.copy_from_slice(&v.as_slice()[off..off + N_INDICATORS]);
        logvar.copy_from_slice(&v.as_slice()[off + N_INDICATORS..off + 2 * N_INDICATORS]);
        Self {
            alpha11: v[0],
            alpha22: v[1],
            gamma12: v[2],
            gamma21: if free_gamma21 { v[3] } else { 0.0 },
            lambda,
            logvar,
        }
    }

    /// Flips each state so its loading block sums to a non-negative value,
    /// adjusting the cross-lagged coefficients to keep the likelihood fixed.
    pub fn sign_normalized(&self) -> Self {
        let mut out = *self;
        let flip1 = self.lambda[..3].iter().sum::<f64>() < 0.0;
        let flip2 = self.lambda[3..].iter().sum::<f64>() < 0.0;
        if flip1 {
            out.lambda[..3].iter_mut().for_each(|l| *l = -*l);
        }
        if flip2 {
            out.lambda[3..].iter_mut().for_each(|l| *l = -*l);
        }
        if flip1 != flip2 {
            out.gamma12 = -out.gamma12;
            out.gamma21 = -out.gamma21;
        }
        out
    }

    /// Reported-scale values: α, γ, λ² and σ², in [`REPORTED_NAMES`] order.
    pub fn reported(&self, free_gamma21: bool) -> Vec<(&'static str, f64)> {
        let mut vals = vec![self.alpha11, self.alpha22, self.gamma12, self.gamma21];
        vals.extend(self.lambda.iter().map(|l| l * l));
        vals.extend(self.logvar.iter().map(|v| v.exp()));
        REPORTED_NAMES
            .iter()
            .copied()
            .zip(vals)
            .filter(|(n, _)| free_gamma21 || *n != "gamma21")
            .collect()
    }
}

fn directions(free_gamma21: bool) -> Vec<Direction> {
    let mut d = vec![
        Direction::Transition(0, 0),
        Direction::Transition(1, 1),
        Direction::Transition(0, 1),
    ];
    if free_gamma21 {
        d.push(Direction::Transition(1, 0));
    }
    d.extend((0..N_INDICATORS).map(Direction::Loading));
    d.extend((0..N_INDICATORS).map(Direction::LogVar));
    d
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegLogLik {
    pub value: f64,
    /// Set when the likelihood was undefined and [`PENALTY`] was returned.
    pub penalized: bool,
}

/// Negative log-likelihood under a stationary initial state.
pub fn neg_loglik(theta: &ParamVector, series: &MaskedSeries) -> NegLogLik {
    neg_loglik_with(theta, series, Initialization::Stationary)
}

pub fn neg_loglik_with(theta: &ParamVector, series: &MaskedSeries, init: Initialization) -> NegLogLik {
    let data = PreparedSeries::new(series);
    match objective(theta, &data, init, &[], None) {
        Some(v) => NegLogLik { value: v, penalized: false },
        None => NegLogLik { value: PENALTY, penalized: true },
    }
}

/// Gradient of [`neg_loglik`] with respect to the free coordinates.
pub fn neg_loglik_gradient(theta: &ParamVector, series: &MaskedSeries, free_gamma21: bool) -> Option<DVector<f64>> {
    let data = PreparedSeries::new(series);
    let dirs = directions(free_gamma21);
    let mut g = vec![0.0; dirs.len()];
    objective(theta, &data, Initialization::Stationary, &dirs, Some(&mut g))?;
    Some(DVector::from_vec(g))
}

fn objective(
    theta: &ParamVector,
    data: &PreparedSeries,
    init: Initialization,
    dirs: &[Direction],
    grad: Option<&mut [f64]>,
) -> Option<f64> {
    let values = [theta.alpha11, theta.alpha22, theta.gamma12, theta.gamma21];
    if values.iter().chain(&theta.lambda).chain(&theta.logvar).any(|v| !v.is_finite()) {
        return None;
    }
    if theta.logvar.iter().any(|&v| v.abs() > 50.0) {
        return None;
    }
    let model = theta.to_model();
    if init == Initialization::Stationary && !(spectral_radius2(&model.a) < 1.0) {
        return None;
    }
    match grad {
        Some(g) => {
            let ll = likelihood::loglik(&model, data, init, dirs, Some(g)).ok()?;
            g.iter_mut().for_each(|v| *v = -*v);
            Some(-ll)
        }
        None => likelihood::loglik(&model, data, init, &[], None).ok().map(|v| -v),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub max_iter: usize,
    pub gtol: f64,
    pub ftol: f64,
    pub init: Initialization,
    pub free_gamma21: bool,
    /// Number of optimisation starts; extra starts perturb the initial values.
    pub starts: usize,
    /// Compute standard errors from the numerical Hessian.
    pub standard_errors: bool,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            gtol: 1e-5,
            ftol: 1e-9,
            init: Initialization::Stationary,
            free_gamma21: false,
            starts: 1,
            standard_errors: true,
            seed: 0,
        }
    }
}

/// Estimate and standard error of one reported parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportedParam {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub estimates: ParamVector,
    /// Standard errors of the free coordinates (loadings and log variances
    /// on their optimisation scale); `None` when the Hessian is not PD.
    pub std_errors: Option<Vec<f64>>,
    pub loglik: f64,
    pub converged: bool,
    pub n_iter: usize,
    pub free_gamma21: bool,
    /// α, γ, λ² and σ² with delta-method standard errors.
    pub derived: Vec<ReportedParam>,
}

impl FitResult {
    pub fn get(&self, name: &str) -> Option<&ReportedParam> {
        self.derived.iter().find(|p| p.name == name)
    }

    /// Standard error of error SD `σᵢ` (delta method from `σ²ᵢ`).
    pub fn sigma_se(&self, indicator: usize) -> Option<f64> {
        let p = self.get(REPORTED_NAMES[10 + indicator])?;
        p.se.map(|se| se / (2.0 * p.estimate.sqrt()))
    }
}

/// Initial values: `α = 0.5`, `γ = 0`, and each column's observed variance
/// split evenly between the loading and the error variance.
pub fn default_init(series: &MaskedSeries) -> ParamVector {
    let mut lambda = [1.0; N_INDICATORS];
    let mut logvar = [0.0; N_INDICATORS];
    for c in 0..N_INDICATORS {
        let vals: Vec<f64> = (0..series.len())
            .filter(|&t| !series.mask[(t, c)])
            .map(|t| series.z[(t, c)])
            .collect();
        if vals.len() < 2 {
            continue;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        if var > 0.0 {
            lambda[c] = (0.5 * var).sqrt();
            logvar[c] = (0.5 * var).ln();
        }
    }
    ParamVector { alpha11: 0.5, alpha22: 0.5, gamma12: 0.0, gamma21: 0.0, lambda, logvar }
}

/// Fits the model by BFGS from `init`.
pub fn fit_mle(series: &MaskedSeries, init: &ParamVector, options: &FitOptions) -> Result<FitResult> {
    if series.is_empty() {
        return Err(Error::Empty("series"));
    }
    let free = options.free_gamma21;
    let data = PreparedSeries::new(series);
    let dirs = directions(free);
    let bfgs_opts = BfgsOptions { max_iter: options.max_iter, gtol: options.gtol, ftol: options.ftol };

    let run = |start: &ParamVector| {
        let mut grad_buf = vec![0.0; dirs.len()];
        let f = |x: &DVector<f64>, g: &mut DVector<f64>| {
            let theta = ParamVector::from_free(x, free);
            let v = objective(&theta, &data, options.init, &dirs, Some(&mut grad_buf))?;
            g.copy_from_slice(&grad_buf);
            Some(v)
        };
        bfgs::minimize(f, start.free_values(free), &bfgs_opts)
    };

    let mut best: Option<BfgsResult> = None;
    for k in 0..options.starts.max(1) {
        let start = if k == 0 { *init } else { perturbed(init, free, options.seed, k) };
        if let Some(r) = run(&start) {
            if best.as_ref().is_none_or(|b| r.f < b.f) {
                best = Some(r);
            }
        }
    }
    let best = best.ok_or_else(|| Error::InvalidParams("likelihood undefined at every start".into()))?;
    let estimates = ParamVector::from_free(&best.x, free).sign_normalized();

    let std_errors = if options.standard_errors {
        hessian_std_errors(&estimates, &data, options.init, &dirs, free)
    } else {
        None
    };
    let derived = report(&estimates, std_errors.as_deref(), free);
    Ok(FitResult {
        estimates,
        std_errors,
        loglik: -best.f,
        converged: best.converged,
        n_iter: best.n_iter,
        free_gamma21: free,
        derived,
    })
}

fn perturbed(init: &ParamVector, free: bool, seed: u64, k: usize) -> ParamVector {
    let mut rng = rng_from_seed(derive_seed(seed, &[stage::MULTISTART, k as u64]));
    let mut v = init.free_values(free);
    for x in v.iter_mut() {
        *x += rng.random_range(-0.25..0.25);
    }
    let mut p = ParamVector::from_free(&v, free);
    p.alpha11 = p.alpha11.clamp(-0.9, 0.9);
    p.alpha22 = p.alpha22.clamp(-0.9, 0.9);
    p
}

/// Standard errors from the inverse of the central-difference Hessian of
/// the analytic gradient.
fn hessian_std_errors(
    theta: &ParamVector,
    data: &PreparedSeries,
    init: Initialization,
    dirs: &[Direction],
    free: bool,
) -> Option<Vec<f64>> {
    let x0 = theta.free_values(free);
    let n = x0.len();
    let mut hess = DMatrix::zeros(n, n);
    let mut gp = vec![0.0; n];
    let mut gm = vec![0.0; n];
    for j in 0..n {
        let step = 1e-5 * x0[j].abs().max(1.0);
        let mut xp = x0.clone();
        xp[j] += step;
        let mut xm = x0.clone();
        xm[j] -= step;
        objective(&ParamVector::from_free(&xp, free), data, init, dirs, Some(&mut gp))?;
        objective(&ParamVector::from_free(&xm, free), data, init, dirs, Some(&mut gm))?;
        for i in 0..n {
            hess[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
        }
    }
    let hess = (&hess + hess.transpose()) * 0.5;
    let cov = hess.cholesky()?.inverse();
    Some((0..n).map(|i| cov[(i, i)].max(0.0).sqrt()).collect())
}

fn report(theta: &ParamVector, se: Option<&[f64]>, free: bool) -> Vec<ReportedParam> {
    let off = if free { 4 } else { 3 };
    let lambda_se = |i: usize| se.map(|s| 2.0 * theta.lambda[i].abs() * s[off + i]);
    let var_se = |i: usize| se.map(|s| theta.logvar[i].exp() * s[off + N_INDICATORS + i]);
    theta
        .reported(free)
        .into_iter()
        .map(|(name, estimate)| {
            let se = match name {
                "alpha11" => se.map(|s| s[0]),
                "alpha22" => se.map(|s| s[1]),
                "gamma12" => se.map(|s| s[2]),
                "gamma21" => se.map(|s| s[3]),
                _ => {
                    let i = name.as_bytes()[name.len() - 1] as usize - b'1' as usize;
                    if name.starts_with("lambda2") {
                        lambda_se(i)
                    } else {
                        var_se(i)
                    }
                }
            };
            ReportedParam { name: name.to_string(), estimate, se }
        })
        .collect()
}
