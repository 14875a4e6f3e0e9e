//! Evaluation statistics over replications: median bias, median absolute
//! relative bias, standard errors, and confidence-interval coverage.
//!
//! Bias is `truth − estimate` throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Replications with `|bias|` above this are left out of bias medians.
pub const DEFAULT_OUTLIER_CUTOFF: f64 = 1.0;
pub const Z_95: f64 = 1.96;

/// Reported parameter groups: `(group, members)`. Members of a group are
/// pooled into one distribution.
pub const PARAMETER_GROUPS: [(&str, &[&str]); 4] = [
    ("alpha", &["alpha11"]),
    ("gamma", &["gamma12"]),
    ("lambda2", &["lambda2_1", "lambda2_2", "lambda2_3"]),
    ("sigma2", &["sigma2_1", "sigma2_2", "sigma2_3"]),
];

/// Median with the midpoint rule for even counts; `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn median_bias(truth: f64, estimates: &[f64]) -> Result<f64> {
    let bias: Vec<f64> = estimates.iter().map(|e| truth - e).collect();
    median(&bias).ok_or(Error::Empty("estimates"))
}

/// Median of `|θ − θ̂| / θ`; `Ok(None)` when the truth is zero.
pub fn median_abs_rel_bias(truth: f64, estimates: &[f64]) -> Result<Option<f64>> {
    if estimates.is_empty() {
        return Err(Error::Empty("estimates"));
    }
    if truth == 0.0 {
        return Ok(None);
    }
    let rel: Vec<f64> = estimates.iter().map(|e| ((truth - e) / truth).abs()).collect();
    Ok(median(&rel))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    /// Percentage in `[0, 100]`; `None` when no replication has an SE.
    pub pct: Option<f64>,
    pub n_used: usize,
    pub n_missing_se: usize,
}

/// Share of replications whose interval `θ̂ ± 1.96·SE` (inclusive) contains
/// the truth. Replications without an SE are left out of the denominator.
pub fn coverage(truth: f64, estimates: &[f64], ses: &[Option<f64>]) -> Result<Coverage> {
    if estimates.len() != ses.len() {
        return Err(Error::InvalidArgument("estimates and standard errors differ in length".into()));
    }
    let mut hit = 0usize;
    let mut used = 0usize;
    for (e, se) in estimates.iter().zip(ses) {
        let Some(se) = se.filter(|s| s.is_finite() && *s >= 0.0) else {
            continue;
        };
        used += 1;
        if (truth - e).abs() <= Z_95 * se {
            hit += 1;
        }
    }
    Ok(Coverage {
        pct: (used > 0).then(|| 100.0 * hit as f64 / used as f64),
        n_used: used,
        n_missing_se: estimates.len() - used,
    })
}

/// One replication of one parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub truth: f64,
    pub estimate: f64,
    pub se: Option<f64>,
}

impl Replicate {
    pub fn bias(&self) -> f64 {
        self.truth - self.estimate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub parameter: String,
    pub median_bias: Option<f64>,
    pub median_abs_rel_bias: Option<f64>,
    pub mean_se: Option<f64>,
    pub coverage_pct: Option<f64>,
    pub n_replications: usize,
    pub n_outliers_excluded: usize,
    pub n_missing_se: usize,
}

/// Summarises replications of one parameter (or a pooled group).
///
/// Replications with `|bias| > cutoff` are dropped from the bias and relative
/// bias medians only; SE and coverage use every replication with an SE.
pub fn summarize_param(parameter: &str, reps: &[Replicate], cutoff: f64) -> ParamSummary {
    let kept: Vec<&Replicate> = reps.iter().filter(|r| r.bias().abs() <= cutoff).collect();
    let bias: Vec<f64> = kept.iter().map(|r| r.bias()).collect();
    let rel: Vec<f64> = kept
        .iter()
        .filter(|r| r.truth != 0.0)
        .map(|r| (r.bias() / r.truth).abs())
        .collect();
    let ses: Vec<f64> = reps.iter().filter_map(|r| r.se).filter(|s| s.is_finite()).collect();
    let mut hit = 0usize;
    for r in reps {
        if let Some(se) = r.se.filter(|s| s.is_finite() && *s >= 0.0) {
            if r.bias().abs() <= Z_95 * se {
                hit += 1;
            }
        }
    }
    let any_zero_truth = reps.iter().any(|r| r.truth == 0.0);
    ParamSummary {
        parameter: parameter.to_string(),
        median_bias: median(&bias),
        median_abs_rel_bias: if any_zero_truth { None } else { median(&rel) },
        mean_se: (!ses.is_empty()).then(|| sorted_mean(&ses)),
        coverage_pct: (!ses.is_empty()).then(|| 100.0 * hit as f64 / ses.len() as f64),
        n_replications: reps.len(),
        n_outliers_excluded: reps.len() - kept.len(),
        n_missing_se: reps.len() - ses.len(),
    }
}

fn sorted_mean(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.iter().sum::<f64>() / s.len() as f64
}

/// Identifies one cell of the design.
#[derive(Debug, Clone, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct CellId {
    pub mechanism: String,
    pub method: String,
    pub alpha: f64,
    pub gamma: f64,
    pub lambda2: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: CellId,
    pub params: Vec<ParamSummary>,
}

impl CellSummary {
    pub fn get(&self, parameter: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.parameter == parameter)
    }
}

/// Summarises every parameter in `records` (`(parameter, replicate)` pairs)
/// plus the pooled groups of [`PARAMETER_GROUPS`].
pub fn summarize_cell(cell: CellId, records: &[(String, Replicate)], cutoff: f64) -> CellSummary {
    let mut names: Vec<&str> = Vec::new();
    for (n, _) in records {
        if !names.contains(&n.as_str()) {
            names.push(n);
        }
    }
    let collect = |members: &[&str]| -> Vec<Replicate> {
        records
            .iter()
            .filter(|(n, _)| members.contains(&n.as_str()))
            .map(|(_, r)| *r)
            .collect()
    };
    let mut params = Vec::new();
    for (group, members) in PARAMETER_GROUPS {
        let reps = collect(members);
        if !reps.is_empty() {
            params.push(summarize_param(group, &reps, cutoff));
        }
    }
    for name in names {
        params.push(summarize_param(name, &collect(&[name]), cutoff));
    }
    CellSummary { cell, params }
}

/// Quantile by linear interpolation at position `(n + 1)p` of the sorted
/// sample, clamped to the sample range.
pub fn quantile(sorted: &[f64], p: f64) -> Option<f64> {
    let n = sorted.len();
    if n == 0 {
        return None;
    }
    let h = ((n as f64 + 1.0) * p).clamp(1.0, n as f64);
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    let a = sorted[lo - 1];
    let b = sorted[lo.min(n - 1)];
    Some(a + frac * (b - a))
}

/// Box-plot statistics: quartiles, whiskers at the most extreme points within
/// 1.5 IQR of the box, and the points beyond them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub lower_whisker: f64,
    pub upper_whisker: f64,
    pub outliers: Vec<f64>,
    pub n: usize,
}

impl BoxStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let q1 = quantile(&v, 0.25)?;
        let med = quantile(&v, 0.5)?;
        let q3 = quantile(&v, 0.75)?;
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let inside: Vec<f64> = v.iter().copied().filter(|x| *x >= lo_fence && *x <= hi_fence).collect();
        Some(Self {
            q1,
            median: med,
            q3,
            lower_whisker: inside.first().copied().unwrap_or(q1),
            upper_whisker: inside.last().copied().unwrap_or(q3),
            outliers: v.iter().copied().filter(|x| *x < lo_fence || *x > hi_fence).collect(),
            n: v.len(),
        })
    }
}
