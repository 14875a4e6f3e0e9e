//! Newline-delimited JSON records.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use ssm_impute::metrics::{CellId, Replicate};

use crate::method::Method;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const CONFIG_ECHO_FILE: &str = "config.toml";
pub const SUMMARIES_FILE: &str = "cell_summaries.json";

/// Mechanism label of Complete records, which see no mask.
pub const NO_MECHANISM: &str = "None";

/// One parameter of one analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    /// Condition index in the full grid.
    pub cell: usize,
    pub sigma2: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub lambda2: f64,
    pub mechanism: String,
    pub rate: f64,
    pub replication: usize,
    pub method: Method,
    pub parameter: String,
    pub truth: f64,
    /// `None` when the analysis failed.
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl FitRecord {
    pub fn cell_id(&self) -> CellId {
        CellId {
            mechanism: self.mechanism.clone(),
            method: self.method.to_string(),
            alpha: self.alpha,
            gamma: self.gamma,
            lambda2: self.lambda2,
            rate: self.rate,
        }
    }

    pub fn failed(&self) -> bool {
        self.estimate.is_none()
    }

    pub fn replicate(&self) -> Option<Replicate> {
        self.estimate.map(|estimate| Replicate { truth: self.truth, estimate, se: self.se })
    }
}

/// Wall-clock time of one analysis, kept apart from the records so that the
/// record file is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub cell: usize,
    pub replication: usize,
    pub mechanism: String,
    pub rate: f64,
    pub method: Method,
    pub wall_time: f64,
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

/// Reads `records.jsonl` from a results directory (or a file path).
pub fn read_records(path: &Path) -> anyhow::Result<Vec<FitRecord>> {
    if path.is_dir() {
        read_jsonl(&path.join(RECORDS_FILE))
    } else {
        read_jsonl(path)
    }
}
