//! The seven analysis methods and how each turns a masked series into
//! parameter estimates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use ssm_impute::em::{em_impute, EmConfig, LevelModel};
use ssm_impute::estimator::{default_init, fit_mle, FitOptions, FitResult};
use ssm_impute::mice::{mice_chain, rubin_pool, MiceConfig, MiceVariant};
use ssm_impute::model::MaskedSeries;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Complete,
    K,
    #[serde(rename = "MICE-def")]
    MiceDef,
    #[serde(rename = "MICE-t")]
    MiceT,
    #[serde(rename = "EM-ARIMA")]
    EmArima,
    #[serde(rename = "EM-Spline")]
    EmSpline,
    #[serde(rename = "EM-Regression")]
    EmRegression,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Complete,
        Method::K,
        Method::MiceDef,
        Method::MiceT,
        Method::EmArima,
        Method::EmSpline,
        Method::EmRegression,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Complete => "Complete",
            Method::K => "K",
            Method::MiceDef => "MICE-def",
            Method::MiceT => "MICE-t",
            Method::EmArima => "EM-ARIMA",
            Method::EmSpline => "EM-Spline",
            Method::EmRegression => "EM-Regression",
        }
    }

    /// Whether the method analyses masked data (everything but Complete).
    pub fn uses_mask(&self) -> bool {
        *self != Method::Complete
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| anyhow::anyhow!("unknown method '{s}'"))
    }
}

/// One reported parameter of a method's analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub name: String,
    pub value: f64,
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub estimates: Vec<Estimate>,
    pub converged: bool,
}

/// Per-method settings shared across a study.
#[derive(Debug, Clone, Copy)]
pub struct MethodSettings<'a> {
    pub fit: &'a FitOptions,
    pub em: &'a EmConfig,
    pub mice: &'a MiceConfig,
}

fn fit(series: &MaskedSeries, options: &FitOptions) -> ssm_impute::Result<FitResult> {
    fit_mle(series, &default_init(series), options)
}

fn from_fit(f: &FitResult, converged: bool) -> MethodOutcome {
    MethodOutcome {
        estimates: f
            .derived
            .iter()
            .map(|p| Estimate { name: p.name.clone(), value: p.estimate, se: p.se })
            .collect(),
        converged,
    }
}

/// Runs `method` on `series`. `seed` feeds the imputation chains and the
/// optimiser's extra starts.
pub fn run_method(
    method: Method,
    series: &MaskedSeries,
    settings: MethodSettings<'_>,
    seed: u64,
) -> ssm_impute::Result<MethodOutcome> {
    let fit_opts = FitOptions { seed, ..settings.fit.clone() };
    match method {
        Method::Complete => {
            let f = fit(&series.unmasked(), &fit_opts)?;
            Ok(from_fit(&f, f.converged))
        }
        Method::K => {
            let f = fit(series, &fit_opts)?;
            Ok(from_fit(&f, f.converged))
        }
        Method::EmArima | Method::EmSpline | Method::EmRegression => {
            let level_model = match method {
                Method::EmArima => LevelModel::Arima,
                Method::EmSpline => LevelModel::Spline,
                _ => LevelModel::Regression,
            };
            let cfg = EmConfig { level_model, ..settings.em.clone() };
            let em = em_impute(series, &cfg)?;
            if !em.converged {
                log::debug!("EM stopped after {} iterations (change {:.2e})", em.iterations, em.final_change);
            }
            let f = fit(&em.to_series(series), &fit_opts)?;
            Ok(from_fit(&f, f.converged && em.converged))
        }
        Method::MiceDef | Method::MiceT => {
            let variant = if method == Method::MiceT { MiceVariant::Lag1 } else { MiceVariant::Def };
            let cfg = MiceConfig { variant, ..settings.mice.clone() };
            let set = mice_chain(series, &cfg, seed)?;
            let fits = (0..set.len())
                .map(|i| fit(&set.series(i, series), &fit_opts))
                .collect::<ssm_impute::Result<Vec<_>>>()?;
            let pooled = rubin_pool(&fits)?;
            Ok(MethodOutcome {
                estimates: pooled
                    .names
                    .iter()
                    .zip(&pooled.estimates)
                    .map(|(n, e)| Estimate { name: n.clone(), value: e.q_bar, se: e.se() })
                    .collect(),
                converged: pooled.converged,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ssm_impute::missingness::{apply_spec, Mechanism, MissingnessSpec};
    use ssm_impute::model::{make_condition, simulate};

    #[test]
    fn names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert!("EM".parse::<Method>().is_err());
    }

    #[test]
    fn complete_ignores_the_mask() {
        let params = make_condition(0.25, 0.7, 0.0).unwrap();
        let raw = simulate(&params, 200, 4, 100).unwrap();
        let fit = FitOptions { standard_errors: false, ..FitOptions::default() };
        let (em, mice) = (EmConfig::default(), MiceConfig::default());
        let settings = MethodSettings { fit: &fit, em: &em, mice: &mice };
        let a = apply_spec(&raw, &MissingnessSpec::preset(Mechanism::Mcar, 0.3).unwrap(), 1).unwrap();
        let b = apply_spec(&raw, &MissingnessSpec::preset(Mechanism::Mnar, 0.15).unwrap(), 2).unwrap();
        assert_ne!(a.mask, b.mask);
        let ra = run_method(Method::Complete, &a, settings, 9).unwrap();
        let rb = run_method(Method::Complete, &b, settings, 9).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(ra.estimates.len(), 15);
    }
}
