//! Study configuration (TOML).
//!
//! Every key is optional; an empty file yields the full default grid. Unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use ssm_impute::em::EmConfig;
use ssm_impute::estimator::FitOptions;
use ssm_impute::mice::MiceConfig;
use ssm_impute::missingness::{Mechanism, MissingnessSpec};
use ssm_impute::model::make_condition;

use crate::method::Method;

/// Environment variable consulted when `threads` is not set.
pub const THREADS_ENV: &str = "SSMIS_THREADS";

/// One (mechanism, rate) entry of the missingness grid. `beta0` and `slope`
/// override the published coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissingnessEntry {
    pub mechanism: Mechanism,
    pub rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope: Option<f64>,
}

impl MissingnessEntry {
    pub fn new(mechanism: Mechanism, rate: f64) -> Self {
        Self { mechanism, rate, beta0: None, slope: None }
    }

    /// Published coefficients with any overrides applied.
    pub fn spec(&self) -> ssm_impute::Result<MissingnessSpec> {
        let mut spec = MissingnessSpec::preset(self.mechanism, self.rate)?;
        if let Some(b) = self.beta0 {
            spec.beta0 = b;
        }
        if let Some(s) = self.slope {
            spec.beta_slope = s;
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub master_seed: u64,
    pub replications: usize,
    /// Series length.
    pub t: usize,
    pub burn_in: usize,
    pub sigma2_levels: Vec<f64>,
    pub alpha_levels: Vec<f64>,
    pub gamma_levels: Vec<f64>,
    pub missingness: Vec<MissingnessEntry>,
    /// Calibrate each mechanism's intercept to its target rate per condition
    /// instead of using the published coefficients.
    pub calibrate: bool,
    pub methods: Vec<Method>,
    pub fit: FitOptions,
    pub em: EmConfig,
    pub mice: MiceConfig,
    /// Worker threads; falls back to `SSMIS_THREADS`, then the core count.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub output_dir: PathBuf,
}

impl Default for StudyConfig {
    fn default() -> Self {
        let missingness = Mechanism::ALL
            .iter()
            .flat_map(|&m| [0.15, 0.30].map(|r| MissingnessEntry::new(m, r)))
            .collect();
        Self {
            master_seed: 20_190_101,
            replications: 100,
            t: 500,
            burn_in: 100,
            sigma2_levels: vec![0.25, 0.75],
            alpha_levels: vec![0.2, 0.7],
            gamma_levels: vec![0.0, 0.15, 0.3],
            missingness,
            calibrate: false,
            methods: Method::ALL.to_vec(),
            fit: FitOptions::default(),
            em: EmConfig::default(),
            mice: MiceConfig::default(),
            threads: None,
            output_dir: PathBuf::from("results"),
        }
    }
}

impl StudyConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text).context("invalid study configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    /// The effective configuration as TOML; [`StudyConfig::from_toml`] reads
    /// it back unchanged.
    pub fn echo(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.replications == 0 {
            bail!("replications must be at least 1");
        }
        if self.t < 20 {
            bail!("t must be at least 20 (got {})", self.t);
        }
        for (key, grid) in [
            ("sigma2_levels", &self.sigma2_levels),
            ("alpha_levels", &self.alpha_levels),
            ("gamma_levels", &self.gamma_levels),
        ] {
            if grid.is_empty() {
                bail!("{key} must not be empty");
            }
        }
        for &s in &self.sigma2_levels {
            for &a in &self.alpha_levels {
                for &g in &self.gamma_levels {
                    make_condition(s, a, g).with_context(|| format!("condition sigma2={s} alpha={a} gamma={g}"))?;
                }
            }
        }
        if self.methods.is_empty() {
            bail!("methods must not be empty");
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                bail!("methods lists {m} twice");
            }
        }
        if self.methods.iter().any(Method::uses_mask) && self.missingness.is_empty() {
            bail!("missingness must not be empty when a method analyses masked data");
        }
        for e in &self.missingness {
            e.spec().with_context(|| format!("missingness entry {} {}", e.mechanism, e.rate))?;
        }
        if self.threads == Some(0) {
            bail!("threads must be at least 1");
        }
        self.em.validate()?;
        self.mice.validate()?;
        Ok(())
    }

    /// Worker count: `threads`, else `SSMIS_THREADS`, else the core count.
    pub fn effective_threads(&self) -> usize {
        self.threads
            .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()))
            .filter(|&n| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}
