//! Missingness mechanisms. Every mechanism masks indicators 1–3 jointly at the
//! selected timepoints; indicators 4–6 stay observed.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{simulate, MaskedSeries, ModelParams, DEFAULT_BURN_IN};
use crate::seed::rng_from_seed;

/// Columns that a mechanism masks.
pub const MASKED_COLUMNS: [usize; 3] = [0, 1, 2];
/// Length of the simulated driver series used for intercept calibration.
pub const CALIBRATION_LENGTH: usize = 200_000;
/// Calibration tolerance on the marginal rate.
pub const CALIBRATION_TOL: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mechanism {
    #[serde(rename = "MCAR")]
    Mcar,
    #[serde(rename = "MAR")]
    Mar,
    #[serde(rename = "TMAR")]
    Tmar,
    #[serde(rename = "ATMAR")]
    Atmar,
    #[serde(rename = "MNAR")]
    Mnar,
}

impl Mechanism {
    pub const ALL: [Mechanism; 5] = [
        Mechanism::Mcar,
        Mechanism::Mar,
        Mechanism::Tmar,
        Mechanism::Atmar,
        Mechanism::Mnar,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mechanism::Mcar => "MCAR",
            Mechanism::Mar => "MAR",
            Mechanism::Tmar => "TMAR",
            Mechanism::Atmar => "ATMAR",
            Mechanism::Mnar => "MNAR",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mechanism::ALL
            .iter()
            .copied()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mechanism '{s}'")))
    }
}

/// Logistic missingness model `p = 1 / (1 + exp(beta0 + beta_slope * d))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissingnessSpec {
    pub mechanism: Mechanism,
    pub target_rate: f64,
    pub beta0: f64,
    pub beta_slope: f64,
    pub calibrated: bool,
}

impl MissingnessSpec {
    /// Spec with the published coefficients for a 15% or 30% target.
    /// Rates in between snap to the nearer of the two coefficient sets.
    pub fn preset(mechanism: Mechanism, target_rate: f64) -> Result<Self> {
        if !(target_rate > 0.0 && target_rate < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "target rate {target_rate} must lie in (0, 1)"
            )));
        }
        let low = target_rate < 0.225;
        let (beta0, beta_slope) = match (mechanism, low) {
            (Mechanism::Mcar, _) => (0.0, 0.0),
            (Mechanism::Tmar, true) => (3.0, -0.2),
            (Mechanism::Tmar, false) => (2.0, -0.2),
            (_, true) => (4.0, -3.5),
            (_, false) => (1.5, -3.0),
        };
        Ok(Self {
            mechanism,
            target_rate,
            beta0,
            beta_slope,
            calibrated: false,
        })
    }
}

/// Missingness probability for a driver value.
pub fn missingness_probability(spec: &MissingnessSpec, driver_value: f64) -> f64 {
    logistic_missing(spec.beta0, spec.beta_slope, driver_value)
}

#[inline]
fn logistic_missing(beta0: f64, slope: f64, d: f64) -> f64 {
    let u = beta0 + slope * d;
    if u >= 0.0 {
        let e = (-u).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + u.exp())
    }
}

fn ensure_unmasked(series: &MaskedSeries) -> Result<()> {
    if series.any_masked() {
        Err(Error::AlreadyMasked)
    } else {
        Ok(())
    }
}

fn mask_row(series: &mut MaskedSeries, t: usize) {
    for &c in &MASKED_COLUMNS {
        series.mask[(t, c)] = true;
    }
}

/// Masks exactly `round(rate * T)` timepoints chosen uniformly without
/// replacement.
pub fn apply_mcar(series: &MaskedSeries, rate: f64, seed: u64) -> Result<MaskedSeries> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("MCAR rate {rate} outside [0, 1)")));
    }
    ensure_unmasked(series)?;
    let t = series.len();
    let k = (rate * t as f64).round() as usize;
    let mut out = series.clone();
    let mut rng = rng_from_seed(seed);
    for row in sample(&mut rng, t, k).into_iter() {
        mask_row(&mut out, row);
    }
    Ok(out)
}

/// Driver values for a mechanism; `None` where the mechanism cannot mask
/// (the first timepoint under ATMAR).
fn drivers(series: &MaskedSeries, mechanism: Mechanism) -> Result<Vec<Option<f64>>> {
    let t = series.len();
    let truth = || series.truth.as_ref().map(|tr| &tr.x).ok_or(Error::MissingTruth);
    Ok(match mechanism {
        Mechanism::Mcar => return Err(Error::MechanismMismatch("MCAR".into())),
        Mechanism::Tmar => series.day_index.iter().map(|&d| Some(d as f64)).collect(),
        Mechanism::Mar => {
            let x = truth()?;
            (0..t).map(|k| Some(x[(k, 1)])).collect()
        }
        Mechanism::Mnar => {
            let x = truth()?;
            (0..t).map(|k| Some(x[(k, 0)])).collect()
        }
        Mechanism::Atmar => {
            let x = truth()?;
            (0..t)
                .map(|k| if k == 0 { None } else { Some(x[(k - 1, 0)]) })
                .collect()
        }
    })
}

/// Applies a logistic mechanism: each timepoint is masked with probability
/// `missingness_probability(spec, d_t)`, where `d_t` is `x2_t` (MAR), the
/// beep index (TMAR), `x1_{t-1}` (ATMAR) or `x1_t` (MNAR).
pub fn apply_mechanism(series: &MaskedSeries, spec: &MissingnessSpec, seed: u64) -> Result<MaskedSeries> {
    if spec.mechanism == Mechanism::Mcar {
        return Err(Error::MechanismMismatch(
            "MCAR (use apply_mcar for exact-count masking)".into(),
        ));
    }
    ensure_unmasked(series)?;
    let d = drivers(series, spec.mechanism)?;
    let mut out = series.clone();
    let mut rng = rng_from_seed(seed);
    for (t, driver) in d.into_iter().enumerate() {
        // one uniform per timepoint keeps the stream aligned across mechanisms
        let u: f64 = rng.random();
        if let Some(v) = driver {
            if u < missingness_probability(spec, v) {
                mask_row(&mut out, t);
            }
        }
    }
    Ok(out)
}

/// Dispatches to `apply_mcar` or `apply_mechanism`.
pub fn apply_spec(series: &MaskedSeries, spec: &MissingnessSpec, seed: u64) -> Result<MaskedSeries> {
    match spec.mechanism {
        Mechanism::Mcar => apply_mcar(series, spec.target_rate, seed),
        _ => apply_mechanism(series, spec, seed),
    }
}

/// Fraction of timepoints carrying a mask.
pub fn realized_rate(series: &MaskedSeries) -> f64 {
    if series.is_empty() {
        0.0
    } else {
        series.masked_rows() as f64 / series.len() as f64
    }
}

/// Finds the intercept that yields `target_rate` as the marginal missingness
/// rate, holding the slope fixed.
///
/// Driver values come from one long simulated series; the marginal rate is
/// the average missingness probability over it, which is monotone in the
/// intercept, so bisection converges deterministically.
pub fn calibrate_intercept(
    mechanism: Mechanism,
    params: &ModelParams,
    target_rate: f64,
    slope: f64,
    seed: u64,
) -> Result<MissingnessSpec> {
    if mechanism == Mechanism::Mcar {
        return Err(Error::MechanismMismatch("MCAR has no intercept".into()));
    }
    if !(target_rate > 0.0 && target_rate < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target rate {target_rate} must lie in (0, 1)"
        )));
    }
    let series = simulate(params, CALIBRATION_LENGTH, seed, DEFAULT_BURN_IN)?;
    let d: Vec<f64> = drivers(&series, mechanism)?.into_iter().flatten().collect();
    let n_total = series.len() as f64;
    // ATMAR never masks its first timepoint, which counts in the denominator
    let rate = |b0: f64| d.iter().map(|&v| logistic_missing(b0, slope, v)).sum::<f64>() / n_total;

    let (mut lo, mut hi) = (-30.0_f64, 30.0_f64);
    let (rate_lo, rate_hi) = (rate(lo), rate(hi));
    if !(rate_lo >= target_rate && rate_hi <= target_rate) {
        return Err(Error::NonBracketing {
            target: target_rate,
            lo,
            hi,
            rate_lo,
            rate_hi,
        });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) > target_rate {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-10 {
            break;
        }
    }
    let beta0 = 0.5 * (lo + hi);
    let achieved = rate(beta0);
    debug_assert!((achieved - target_rate).abs() <= CALIBRATION_TOL);
    Ok(MissingnessSpec {
        mechanism,
        target_rate,
        beta0,
        beta_slope: slope,
        calibrated: true,
    })
}
