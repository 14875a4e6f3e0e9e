//! Comma-separated summary tables.
//!
//! Every table file comes twice: rounded to three decimals and, with a
//! `_full` suffix, at full precision. Tables keyed by cell pool over the
//! cross-lag and missingness-rate levels; the same tables restricted to one
//! (γ, rate) slice go to a `gamma_<γ>_rate_<rate>` subdirectory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ssm_impute::estimator::REPORTED_NAMES;
use ssm_impute::metrics::{summarize_param, ParamSummary, Replicate, DEFAULT_OUTLIER_CUTOFF, PARAMETER_GROUPS};
use ssm_impute::missingness::Mechanism;

use crate::method::Method;
use crate::records::{FitRecord, NO_MECHANISM};

pub const HEADER: &str = "missingness,imputation,true_alpha,true_lambda2,parameter,value";
pub const FACTOR_HEADER: &str = "factor,level,parameter,value";
const ALL: &str = "All";

#[derive(Debug, Clone, Copy)]
pub struct TableOptions {
    pub outlier_cutoff: f64,
    /// Drop records whose fit did not converge.
    pub exclude_failed: bool,
}

impl Default for TableOptions {
    fn default() -> Self {
        Self { outlier_cutoff: DEFAULT_OUTLIER_CUTOFF, exclude_failed: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stat {
    MedianBias,
    Coverage,
    MeanSe,
    MedianAbsRelBias,
}

impl Stat {
    fn pick(self, s: &ParamSummary) -> Option<f64> {
        match self {
            Stat::MedianBias => s.median_bias,
            Stat::Coverage => s.coverage_pct,
            Stat::MeanSe => s.mean_se,
            Stat::MedianAbsRelBias => s.median_abs_rel_bias,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub missingness: String,
    pub imputation: String,
    pub true_alpha: String,
    pub true_lambda2: String,
    pub parameter: String,
    pub value: Option<f64>,
}

/// Three-decimal rendering; negative zero prints as `0.000`.
pub fn fmt3(v: Option<f64>) -> String {
    match v {
        None => "NA".into(),
        Some(v) => {
            let s = format!("{v:.3}");
            if s == "-0.000" {
                "0.000".into()
            } else {
                s
            }
        }
    }
}

pub fn fmt_full(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |v| format!("{v}"))
}

fn level(v: f64) -> String {
    format!("{v}")
}

/// Float key with a total order.
fn fkey(v: f64) -> i64 {
    (v * 1e9).round() as i64
}

fn mechanism_rank(m: &str) -> usize {
    if m == NO_MECHANISM {
        return 0;
    }
    Mechanism::ALL.iter().position(|x| x.as_str() == m).map_or(99, |p| p + 1)
}

fn method_rank(m: Method) -> usize {
    Method::ALL.iter().position(|x| *x == m).unwrap_or(99)
}

/// Parameters reported per table: the pooled groups, then each parameter.
fn parameter_order(records: &[&FitRecord], extra: &[String]) -> Vec<String> {
    let mut names: Vec<String> = PARAMETER_GROUPS.iter().map(|(g, _)| g.to_string()).collect();
    for n in REPORTED_NAMES {
        if records.iter().any(|r| r.parameter == n) {
            names.push(n.to_string());
        }
    }
    names.extend(extra.iter().cloned());
    names
}

fn members(parameter: &str) -> Vec<&str> {
    PARAMETER_GROUPS
        .iter()
        .find(|(g, _)| *g == parameter)
        .map_or_else(|| vec![parameter], |(_, m)| m.to_vec())
}

fn summarize(records: &[&FitRecord], parameter: &str, cutoff: f64) -> Option<ParamSummary> {
    let m = members(parameter);
    let reps: Vec<Replicate> = records
        .iter()
        .filter(|r| m.contains(&r.parameter.as_str()))
        .filter_map(|r| r.replicate())
        .collect();
    (!reps.is_empty()).then(|| summarize_param(parameter, &reps, cutoff))
}

/// Adds `sigma_i` records (error SD with its delta-method SE) next to each
/// `sigma2_i` record.
fn with_sigma_scale(records: &[&FitRecord]) -> Vec<FitRecord> {
    records
        .iter()
        .filter_map(|r| {
            let i = r.parameter.strip_prefix("sigma2_")?;
            let est = r.estimate?.max(0.0).sqrt();
            Some(FitRecord {
                parameter: format!("sigma_{i}"),
                truth: r.truth.sqrt(),
                estimate: Some(est),
                se: r.se.filter(|_| est > 0.0).map(|s| s / (2.0 * est)),
                ..(*r).clone()
            })
        })
        .collect()
}

type CellKey = (usize, String, usize, Method, i64, i64);

fn cell_key(r: &FitRecord) -> CellKey {
    (
        mechanism_rank(&r.mechanism),
        r.mechanism.clone(),
        method_rank(r.method),
        r.method,
        fkey(r.alpha),
        fkey(r.lambda2),
    )
}

/// Rows of one statistic for every (missingness, imputation, α, λ²) cell.
pub fn cell_rows(records: &[&FitRecord], stat: Stat, cutoff: f64) -> Vec<Row> {
    let sigma_scale;
    let mut all: Vec<&FitRecord> = records.to_vec();
    let mut extra = Vec::new();
    if stat == Stat::MeanSe {
        sigma_scale = with_sigma_scale(records);
        for r in &sigma_scale {
            if !extra.contains(&r.parameter) {
                extra.push(r.parameter.clone());
            }
        }
        extra.sort();
        all.extend(sigma_scale.iter());
    }
    let params = parameter_order(records, &extra);
    let mut groups: BTreeMap<CellKey, (f64, f64, Vec<&FitRecord>)> = BTreeMap::new();
    for r in all {
        groups.entry(cell_key(r)).or_insert_with(|| (r.alpha, r.lambda2, Vec::new())).2.push(r);
    }
    let mut rows = Vec::new();
    for ((_, mech, _, method, _, _), (alpha, lambda2, recs)) in &groups {
        for p in &params {
            if let Some(s) = summarize(recs, p, cutoff) {
                rows.push(Row {
                    missingness: mech.clone(),
                    imputation: method.to_string(),
                    true_alpha: level(*alpha),
                    true_lambda2: level(*lambda2),
                    parameter: p.clone(),
                    value: stat.pick(&s),
                });
            }
        }
    }
    rows
}

const TABLE1_PARAMS: [&str; 4] = ["alpha", "gamma", "lambda2", "sigma2"];

/// Overall median bias for each level of α, missingness mechanism, method
/// and λ², pooling everything else.
pub fn table1_rows(records: &[&FitRecord], cutoff: f64) -> Vec<Row> {
    let mut rows = Vec::new();
    let mut push = |recs: Vec<&FitRecord>, miss: String, imp: String, a: String, l: String| {
        for p in TABLE1_PARAMS {
            if let Some(s) = summarize(&recs, p, cutoff) {
                rows.push(Row {
                    missingness: miss.clone(),
                    imputation: imp.clone(),
                    true_alpha: a.clone(),
                    true_lambda2: l.clone(),
                    parameter: p.to_string(),
                    value: s.median_bias,
                });
            }
        }
    };
    let levels = |f: fn(&FitRecord) -> f64| {
        let mut v: Vec<i64> = records.iter().map(|r| fkey(f(r))).collect();
        v.sort();
        v.dedup();
        v
    };
    for a in levels(|r| r.alpha) {
        let recs = records.iter().copied().filter(|r| fkey(r.alpha) == a).collect();
        push(recs, ALL.into(), ALL.into(), level(a as f64 / 1e9), ALL.into());
    }
    let mut mechs: Vec<&str> = records.iter().map(|r| r.mechanism.as_str()).collect();
    mechs.sort_by_key(|m| (mechanism_rank(m), m.to_string()));
    mechs.dedup();
    for m in mechs {
        let recs = records.iter().copied().filter(|r| r.mechanism == m).collect();
        push(recs, m.to_string(), ALL.into(), ALL.into(), ALL.into());
    }
    let mut methods: Vec<Method> = records.iter().map(|r| r.method).collect();
    methods.sort_by_key(|m| method_rank(*m));
    methods.dedup();
    for m in methods {
        let recs = records.iter().copied().filter(|r| r.method == m).collect();
        push(recs, ALL.into(), m.to_string(), ALL.into(), ALL.into());
    }
    for l in levels(|r| r.lambda2) {
        let recs = records.iter().copied().filter(|r| fkey(r.lambda2) == l).collect();
        push(recs, ALL.into(), ALL.into(), ALL.into(), level(l as f64 / 1e9));
    }
    rows
}

/// Overall median bias by cross-lag level and by missingness rate
/// (masked-data analyses only for the latter).
pub fn table1_factor_rows(records: &[&FitRecord], cutoff: f64) -> Vec<(String, String, String, Option<f64>)> {
    let mut out = Vec::new();
    let mut gammas: Vec<i64> = records.iter().map(|r| fkey(r.gamma)).collect();
    gammas.sort();
    gammas.dedup();
    let mut rates: Vec<i64> = records.iter().filter(|r| r.method.uses_mask()).map(|r| fkey(r.rate)).collect();
    rates.sort();
    rates.dedup();
    for (factor, keys, pick) in [
        ("gamma", gammas, (|r: &FitRecord| r.gamma) as fn(&FitRecord) -> f64),
        ("missingness_rate", rates, |r: &FitRecord| r.rate),
    ] {
        for k in keys {
            let recs: Vec<&FitRecord> = records
                .iter()
                .copied()
                .filter(|r| fkey(pick(r)) == k && (factor == "gamma" || r.method.uses_mask()))
                .collect();
            for p in TABLE1_PARAMS {
                if let Some(s) = summarize(&recs, p, cutoff) {
                    out.push((factor.to_string(), level(k as f64 / 1e9), p.to_string(), s.median_bias));
                }
            }
        }
    }
    out
}

fn render(rows: &[Row], full: bool) -> String {
    let mut s = String::from(HEADER);
    s.push('\n');
    for r in rows {
        let v = if full { fmt_full(r.value) } else { fmt3(r.value) };
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.missingness, r.imputation, r.true_alpha, r.true_lambda2, r.parameter, v
        ));
    }
    s
}

fn write_pair(dir: &Path, stem: &str, rounded: String, full: String, written: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    for (name, body) in [(format!("{stem}.csv"), rounded), (format!("{stem}_full.csv"), full)] {
        let path = dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
    }
    Ok(())
}

const CELL_TABLES: [(&str, Stat); 4] = [
    ("median_bias_by_cell", Stat::MedianBias),
    ("coverage_by_cell", Stat::Coverage),
    ("se_by_cell", Stat::MeanSe),
    ("marb_by_cell", Stat::MedianAbsRelBias),
];

fn write_cell_tables(dir: &Path, records: &[&FitRecord], cutoff: f64, written: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    for (stem, stat) in CELL_TABLES {
        let rows = cell_rows(records, stat, cutoff);
        write_pair(dir, stem, render(&rows, false), render(&rows, true), written)?;
    }
    Ok(())
}

/// Writes every table under `out_dir`; returns the files written.
pub fn emit_tables(records: &[FitRecord], out_dir: &Path, options: &TableOptions) -> anyhow::Result<Vec<PathBuf>> {
    let kept: Vec<&FitRecord> = records
        .iter()
        .filter(|r| !r.failed() && !(options.exclude_failed && !r.converged))
        .collect();
    let failed = records.iter().filter(|r| r.failed()).count();
    if failed > 0 {
        log::warn!("{failed} record(s) from failed analyses left out of the tables");
    }
    let cutoff = options.outlier_cutoff;
    let mut written = Vec::new();
    fs::create_dir_all(out_dir)?;

    let t1 = table1_rows(&kept, cutoff);
    write_pair(out_dir, "table1_overall_median_bias", render(&t1, false), render(&t1, true), &mut written)?;
    let factor = table1_factor_rows(&kept, cutoff);
    let render_factor = |full: bool| {
        let mut s = String::from(FACTOR_HEADER);
        s.push('\n');
        for (f, l, p, v) in &factor {
            let v = if full { fmt_full(*v) } else { fmt3(*v) };
            s.push_str(&format!("{f},{l},{p},{v}\n"));
        }
        s
    };
    write_pair(out_dir, "table1_by_gamma_and_rate", render_factor(false), render_factor(true), &mut written)?;

    write_cell_tables(out_dir, &kept, cutoff, &mut written)?;

    for (gamma, rate) in slices(&kept) {
        let recs: Vec<&FitRecord> = kept
            .iter()
            .copied()
            .filter(|r| fkey(r.gamma) == fkey(gamma) && (!r.method.uses_mask() || fkey(r.rate) == fkey(rate)))
            .collect();
        write_cell_tables(&out_dir.join(slice_dir_name(gamma, rate)), &recs, cutoff, &mut written)?;
    }
    Ok(written)
}

/// (γ, rate) pairs present among masked-data records.
pub fn slices(records: &[&FitRecord]) -> Vec<(f64, f64)> {
    let mut keys: Vec<(i64, i64)> = records
        .iter()
        .filter(|r| r.method.uses_mask())
        .map(|r| (fkey(r.gamma), fkey(r.rate)))
        .collect();
    keys.sort();
    keys.dedup();
    keys.into_iter().map(|(g, r)| (g as f64 / 1e9, r as f64 / 1e9)).collect()
}

pub fn slice_dir_name(gamma: f64, rate: f64) -> String {
    format!("gamma_{}_rate_{}", level(gamma), level(rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: Method, mech: &str, alpha: f64, parameter: &str, truth: f64, est: f64, se: Option<f64>) -> FitRecord {
        FitRecord {
            cell: 0,
            sigma2: 0.25,
            alpha,
            gamma: 0.0,
            lambda2: 0.75,
            mechanism: mech.into(),
            rate: if mech == NO_MECHANISM { 0.0 } else { 0.3 },
            replication: 0,
            method,
            parameter: parameter.into(),
            truth,
            estimate: Some(est),
            se,
            converged: true,
            error: None,
        }
    }

    #[test]
    fn rounding() {
        assert_eq!(fmt3(Some(-0.0001)), "0.000");
        assert_eq!(fmt3(Some(0.1236)), "0.124");
        assert_eq!(fmt3(None), "NA");
        assert_eq!(fmt_full(Some(0.1)), "0.1");
    }

    #[test]
    fn empty_records_give_header_only_files() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_tables(&[], dir.path(), &TableOptions::default()).unwrap();
        assert_eq!(files.len(), 12);
        for f in files {
            let body = fs::read_to_string(&f).unwrap();
            assert_eq!(body.lines().count(), 1, "{}", f.display());
        }
    }

    #[test]
    fn cell_rows_group_and_pool() {
        let recs = [
            rec(Method::K, "TMAR", 0.7, "alpha11", 0.7, 0.6, Some(0.05)),
            rec(Method::K, "TMAR", 0.7, "alpha11", 0.7, 0.8, Some(0.2)),
            rec(Method::K, "TMAR", 0.7, "lambda2_1", 0.75, 0.7, Some(0.01)),
            rec(Method::K, "TMAR", 0.7, "lambda2_2", 0.75, 0.5, Some(0.01)),
            rec(Method::Complete, NO_MECHANISM, 0.7, "alpha11", 0.7, 0.7, Some(0.1)),
        ];
        let refs: Vec<&FitRecord> = recs.iter().collect();
        let bias = cell_rows(&refs, Stat::MedianBias, 1.0);
        assert_eq!(bias[0].missingness, NO_MECHANISM);
        let pooled = bias.iter().find(|r| r.imputation == "K" && r.parameter == "lambda2").unwrap();
        assert!((pooled.value.unwrap() - 0.15).abs() < 1e-12);
        let cov = cell_rows(&refs, Stat::Coverage, 1.0);
        let a = cov.iter().find(|r| r.imputation == "K" && r.parameter == "alpha").unwrap();
        assert_eq!(a.value, Some(50.0));
        assert!(cov.iter().all(|r| r.value.is_none_or(|v| (0.0..=100.0).contains(&v))));
    }

    #[test]
    fn se_table_reports_both_scales() {
        let recs = [rec(Method::K, "MAR", 0.2, "sigma2_1", 0.25, 0.25, Some(0.1))];
        let refs: Vec<&FitRecord> = recs.iter().collect();
        let rows = cell_rows(&refs, Stat::MeanSe, 1.0);
        let s = rows.iter().find(|r| r.parameter == "sigma_1").unwrap();
        assert!((s.value.unwrap() - 0.1).abs() < 1e-12);
        assert!(rows.iter().any(|r| r.parameter == "sigma2_1"));
    }

    #[test]
    fn table1_levels() {
        let recs = [
            rec(Method::Complete, NO_MECHANISM, 0.2, "alpha11", 0.2, 0.19, None),
            rec(Method::K, "MCAR", 0.7, "alpha11", 0.7, 0.72, None),
        ];
        let refs: Vec<&FitRecord> = recs.iter().collect();
        let rows = table1_rows(&refs, 1.0);
        let find = |m: &str, i: &str, a: &str| {
            rows.iter()
                .find(|r| r.missingness == m && r.imputation == i && r.true_alpha == a && r.parameter == "alpha")
                .unwrap()
                .value
                .unwrap()
        };
        assert!((find("All", "Complete", "All") - 0.01).abs() < 1e-12);
        assert!((find("MCAR", "All", "All") + 0.02).abs() < 1e-12);
        assert!((find("All", "All", "0.7") + 0.02).abs() < 1e-12);
        assert!((find(NO_MECHANISM, "All", "All") - 0.01).abs() < 1e-12);
    }

    #[test]
    fn output_is_deterministic() {
        let recs: Vec<FitRecord> = (0..20)
            .map(|i| rec(Method::MiceT, "TMAR", 0.7, "alpha11", 0.7, 0.5 + 0.01 * i as f64, Some(0.1)))
            .collect();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let fa = emit_tables(&recs, a.path(), &TableOptions::default()).unwrap();
        emit_tables(&recs, b.path(), &TableOptions::default()).unwrap();
        for f in fa {
            let rel = f.strip_prefix(a.path()).unwrap();
            assert_eq!(fs::read(&f).unwrap(), fs::read(b.path().join(rel)).unwrap());
        }
        assert!(a.path().join("gamma_0_rate_0.3/median_bias_by_cell.csv").exists());
    }
}
