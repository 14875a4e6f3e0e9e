//! Monte-Carlo study runner.
//!
//! The unit of work is one (condition, replication): a single raw series is
//! simulated, Complete is fitted once on it, and every missingness spec is
//! applied to that same series before each masked-data method runs. Units
//! run in parallel; one writer appends their records in unit order, so the
//! record file does not depend on the thread count.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::mpsc;
use std::time::Instant;

use anyhow::{bail, Context};
use rayon::prelude::*;
use ssm_impute::metrics::{summarize_cell, CellId, CellSummary, DEFAULT_OUTLIER_CUTOFF};
use ssm_impute::missingness::{apply_spec, calibrate_intercept, Mechanism, MissingnessSpec};
use ssm_impute::model::{make_condition, simulate, MaskedSeries, ModelParams};
use ssm_impute::seed::{derive_seed, stage};
use ssm_impute::estimator::REPORTED_NAMES;

use crate::config::StudyConfig;
use crate::method::{run_method, MethodSettings};
use crate::records::*;

/// One simulation condition.
#[derive(Debug, Clone)]
pub struct Cell {
    /// Position in the full grid; seeds derive from it.
    pub index: usize,
    pub sigma2: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub params: ModelParams,
}

impl Cell {
    pub fn lambda2(&self) -> f64 {
        1.0 - self.sigma2
    }

    /// True value of a reported parameter.
    pub fn truth(&self, parameter: &str) -> f64 {
        match parameter {
            "alpha11" | "alpha22" => self.alpha,
            "gamma12" => self.gamma,
            "gamma21" => 0.0,
            p if p.starts_with("lambda2_") => self.lambda2(),
            p if p.starts_with("sigma2_") => self.sigma2,
            _ => f64::NAN,
        }
    }
}

/// Conditions in grid order (σ² outermost, γ innermost).
pub fn cells(config: &StudyConfig) -> anyhow::Result<Vec<Cell>> {
    let mut out = Vec::new();
    for &sigma2 in &config.sigma2_levels {
        for &alpha in &config.alpha_levels {
            for &gamma in &config.gamma_levels {
                out.push(Cell {
                    index: out.len(),
                    sigma2,
                    alpha,
                    gamma,
                    params: make_condition(sigma2, alpha, gamma)?,
                });
            }
        }
    }
    Ok(out)
}

/// Selects conditions by level, e.g. `sigma2=0.25,alpha=0.7`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellFilter {
    pub sigma2: Option<f64>,
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
}

impl std::str::FromStr for CellFilter {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        let mut f = CellFilter::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .with_context(|| format!("expected key=value in cell filter, got '{part}'"))?;
            let v: f64 = value.trim().parse().with_context(|| format!("bad number in '{part}'"))?;
            match key.trim() {
                "sigma2" => f.sigma2 = Some(v),
                "alpha" => f.alpha = Some(v),
                "gamma" => f.gamma = Some(v),
                other => bail!("unknown cell filter key '{other}' (use sigma2, alpha, gamma)"),
            }
        }
        Ok(f)
    }
}

impl CellFilter {
    pub fn matches(&self, cell: &Cell) -> bool {
        let ok = |want: Option<f64>, have: f64| want.is_none_or(|w| (w - have).abs() < 1e-9);
        ok(self.sigma2, cell.sigma2) && ok(self.alpha, cell.alpha) && ok(self.gamma, cell.gamma)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub cells: Option<CellFilter>,
    pub resume: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub units_total: usize,
    pub units_run: usize,
    pub units_skipped: usize,
    pub records_written: usize,
    pub failures: usize,
}

/// Missingness specs of `cell`, calibrated if the config asks for it.
pub fn cell_specs(config: &StudyConfig, cell: &Cell) -> anyhow::Result<Vec<MissingnessSpec>> {
    config
        .missingness
        .iter()
        .enumerate()
        .map(|(k, entry)| {
            let spec = entry.spec()?;
            if !config.calibrate || entry.mechanism == Mechanism::Mcar || entry.beta0.is_some() {
                return Ok(spec);
            }
            let seed = derive_seed(config.master_seed, &[stage::CALIBRATE, cell.index as u64, k as u64]);
            calibrate_intercept(entry.mechanism, &cell.params, entry.rate, spec.beta_slope, seed)
                .with_context(|| format!("calibrating {} {} for cell {}", entry.mechanism, entry.rate, cell.index))
        })
        .collect()
}

/// The raw series of one (cell, replication) and its masked versions, one
/// per spec. Every mask is applied to the same raw draw.
pub fn unit_series(
    config: &StudyConfig,
    cell: &Cell,
    specs: &[MissingnessSpec],
    rep: usize,
) -> (Result<MaskedSeries, String>, Vec<Result<MaskedSeries, String>>) {
    let key = [cell.index as u64, rep as u64];
    let sim_seed = derive_seed(config.master_seed, &[stage::SIMULATE, key[0], key[1]]);
    let raw = simulate(&cell.params, config.t, sim_seed, config.burn_in).map_err(|e| format!("simulation failed: {e}"));
    let masked = specs
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let series = raw.as_ref().map_err(Clone::clone)?;
            let seed = derive_seed(config.master_seed, &[stage::MISSINGNESS, key[0], key[1], k as u64]);
            apply_spec(series, spec, seed).map_err(|e| format!("masking failed: {e}"))
        })
        .collect();
    (raw, masked)
}

/// Records and timings of one (cell, replication).
pub fn run_unit(
    config: &StudyConfig,
    cell: &Cell,
    specs: &[MissingnessSpec],
    rep: usize,
) -> (Vec<FitRecord>, Vec<TimingRecord>) {
    let settings = MethodSettings { fit: &config.fit, em: &config.em, mice: &config.mice };
    let unit_key = [cell.index as u64, rep as u64];
    let names: Vec<&str> = REPORTED_NAMES
        .iter()
        .copied()
        .filter(|n| config.fit.free_gamma21 || *n != "gamma21")
        .collect();
    let mut records = Vec::new();
    let mut timings = Vec::new();

    let (raw, masked_sets) = unit_series(config, cell, specs, rep);

    let mut emit = |mechanism: &str, rate: f64, method, outcome: Result<crate::method::MethodOutcome, String>, secs: f64| {
        let base = FitRecord {
            cell: cell.index,
            sigma2: cell.sigma2,
            alpha: cell.alpha,
            gamma: cell.gamma,
            lambda2: cell.lambda2(),
            mechanism: mechanism.to_string(),
            rate,
            replication: rep,
            method,
            parameter: String::new(),
            truth: 0.0,
            estimate: None,
            se: None,
            converged: false,
            error: None,
        };
        match outcome {
            Ok(o) => {
                for e in o.estimates {
                    records.push(FitRecord {
                        truth: cell.truth(&e.name),
                        parameter: e.name,
                        estimate: Some(e.value),
                        se: e.se,
                        converged: o.converged,
                        ..base.clone()
                    });
                }
            }
            Err(msg) => {
                log::warn!("cell {} rep {rep} {mechanism} {rate} {method}: {msg}", cell.index);
                for n in &names {
                    records.push(FitRecord {
                        parameter: n.to_string(),
                        truth: cell.truth(n),
                        error: Some(msg.clone()),
                        ..base.clone()
                    });
                }
            }
        }
        timings.push(TimingRecord {
            cell: cell.index,
            replication: rep,
            mechanism: mechanism.to_string(),
            rate,
            method,
            wall_time: secs,
        });
    };

    for (mi, &method) in config.methods.iter().enumerate() {
        if method.uses_mask() {
            continue;
        }
        let start = Instant::now();
        let seed = derive_seed(config.master_seed, &[stage::MULTISTART, unit_key[0], unit_key[1], u64::MAX, mi as u64]);
        let outcome = match &raw {
            Ok(series) => run_method(method, series, settings, seed).map_err(|e| e.to_string()),
            Err(e) => Err(e.clone()),
        };
        emit(NO_MECHANISM, 0.0, method, outcome, start.elapsed().as_secs_f64());
    }

    for (k, spec) in specs.iter().enumerate() {
        let masked = &masked_sets[k];
        for (mi, &method) in config.methods.iter().enumerate() {
            if !method.uses_mask() {
                continue;
            }
            let start = Instant::now();
            let seed = derive_seed(config.master_seed, &[stage::MICE, unit_key[0], unit_key[1], k as u64, mi as u64]);
            let outcome = match masked {
                Ok(series) => run_method(method, series, settings, seed).map_err(|e| e.to_string()),
                Err(e) => Err(e.clone()),
            };
            emit(spec.mechanism.as_str(), spec.target_rate, method, outcome, start.elapsed().as_secs_f64());
        }
    }
    (records, timings)
}

fn read_checkpoint(path: &Path) -> anyhow::Result<HashSet<(usize, usize)>> {
    if !path.exists() {
        return Ok(HashSet::new());
    }
    let mut done = HashSet::new();
    for line in fs::read_to_string(path)?.lines() {
        let mut it = line.split_whitespace().map(str::parse::<usize>);
        if let (Some(Ok(c)), Some(Ok(r))) = (it.next(), it.next()) {
            done.insert((c, r));
        }
    }
    Ok(done)
}

/// Rewrites `path` keeping only records of checkpointed units, dropping any
/// partial unit left by an interrupted run.
fn prune_records(path: &Path, done: &HashSet<(usize, usize)>) -> anyhow::Result<()> {
    #[derive(serde::Deserialize)]
    struct UnitOf {
        cell: usize,
        replication: usize,
    }
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut w = BufWriter::new(File::create(path)?);
    // original lines are kept verbatim so floats are not re-rounded
    for line in text.lines() {
        let Ok(u) = serde_json::from_str::<UnitOf>(line) else { continue };
        if done.contains(&(u.cell, u.replication)) {
            writeln!(w, "{line}")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Runs the study described by `config`, writing into `config.output_dir`.
pub fn run_study(config: &StudyConfig, options: &RunOptions) -> anyhow::Result<RunSummary> {
    config.validate()?;
    let out = &config.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let echo_path = out.join(CONFIG_ECHO_FILE);
    let echo = config.echo()?;
    let records_path = out.join(RECORDS_FILE);
    let timings_path = out.join(TIMINGS_FILE);
    let checkpoint_path = out.join(CHECKPOINT_FILE);

    let done = if options.resume {
        if echo_path.exists() {
            let previous = StudyConfig::from_toml(&fs::read_to_string(&echo_path)?)?;
            if previous.echo()? != echo {
                bail!("configuration differs from the run being resumed in {}", out.display());
            }
        }
        let done = read_checkpoint(&checkpoint_path)?;
        prune_records(&records_path, &done)?;
        done
    } else {
        for p in [&records_path, &timings_path, &checkpoint_path] {
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
        HashSet::new()
    };
    fs::write(&echo_path, &echo)?;

    let all_cells = cells(config)?;
    let selected: Vec<Cell> = all_cells
        .into_iter()
        .filter(|c| options.cells.as_ref().is_none_or(|f| f.matches(c)))
        .collect();
    if selected.is_empty() {
        bail!("no condition matches the cell filter");
    }

    let threads = config.effective_threads();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    log::info!("running on {threads} thread(s)");

    let specs: Vec<Vec<MissingnessSpec>> =
        pool.install(|| selected.par_iter().map(|c| cell_specs(config, c)).collect::<anyhow::Result<_>>())?;

    let units: Vec<(usize, usize)> = (0..selected.len())
        .flat_map(|ci| (0..config.replications).map(move |r| (ci, r)))
        .collect();
    let pending: Vec<(usize, usize)> = units
        .iter()
        .copied()
        .filter(|&(ci, r)| !done.contains(&(selected[ci].index, r)))
        .collect();
    let mut summary = RunSummary {
        units_total: units.len(),
        units_skipped: units.len() - pending.len(),
        ..RunSummary::default()
    };

    let append = |p: &Path| OpenOptions::new().create(true).append(true).open(p);
    let mut rec_w = BufWriter::new(append(&records_path)?);
    let mut time_w = BufWriter::new(append(&timings_path)?);
    let mut ckpt_w = append(&checkpoint_path)?;

    let (tx, rx) = mpsc::channel::<(usize, Vec<FitRecord>, Vec<TimingRecord>)>();
    let n_pending = pending.len();
    let (pending, selected) = (&pending, &selected);
    let writer = std::thread::scope(|scope| -> anyhow::Result<RunSummary> {
        let handle = scope.spawn(move || -> anyhow::Result<RunSummary> {
            let mut buffer = BTreeMap::new();
            let mut next = 0usize;
            for (pos, recs, times) in rx {
                buffer.insert(pos, (recs, times));
                while let Some((recs, times)) = buffer.remove(&next) {
                    let (ci, rep) = pending[next];
                    for r in &recs {
                        writeln!(rec_w, "{}", serde_json::to_string(r)?)?;
                    }
                    for t in &times {
                        writeln!(time_w, "{}", serde_json::to_string(t)?)?;
                    }
                    rec_w.flush()?;
                    time_w.flush()?;
                    writeln!(ckpt_w, "{} {}", selected[ci].index, rep)?;
                    summary.records_written += recs.len();
                    summary.failures += recs.iter().filter(|r| r.failed()).count();
                    summary.units_run += 1;
                    next += 1;
                    if next % 10 == 0 || next == n_pending {
                        log::info!("{next}/{n_pending} units written");
                    }
                }
            }
            Ok(summary)
        });
        pool.install(|| {
            pending.par_iter().enumerate().for_each_with(tx, |tx, (pos, &(ci, rep))| {
                let (recs, times) = run_unit(config, &selected[ci], &specs[ci], rep);
                // the writer only goes away on an I/O error, reported below
                let _ = tx.send((pos, recs, times));
            });
        });
        handle.join().expect("record writer panicked")
    })?;

    let records = read_records(&records_path)?;
    let summaries = summarize_records(&records, DEFAULT_OUTLIER_CUTOFF, false);
    fs::write(out.join(SUMMARIES_FILE), serde_json::to_string_pretty(&summaries)?)?;
    Ok(writer)
}

/// Per-cell summaries, cells in a stable order.
pub fn summarize_records(records: &[FitRecord], cutoff: f64, exclude_failed: bool) -> Vec<CellSummary> {
    let mut groups: Vec<(CellId, Vec<(String, ssm_impute::metrics::Replicate)>)> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        if exclude_failed && !r.converged {
            continue;
        }
        let Some(rep) = r.replicate() else { continue };
        let id = r.cell_id();
        let key = format!("{}|{}|{}|{}|{}|{}", id.mechanism, id.method, id.alpha, id.gamma, id.lambda2, id.rate);
        let i = *index.entry(key).or_insert_with(|| {
            groups.push((id, Vec::new()));
            groups.len() - 1
        });
        groups[i].1.push((r.parameter.clone(), rep));
    }
    let mut out: Vec<CellSummary> = groups.into_iter().map(|(id, recs)| summarize_cell(id, &recs, cutoff)).collect();
    out.sort_by(|a, b| {
        let ka = (&a.cell.mechanism, &a.cell.method);
        let kb = (&b.cell.mechanism, &b.cell.method);
        ka.cmp(&kb).then(
            (a.cell.alpha, a.cell.gamma, a.cell.lambda2, a.cell.rate)
                .partial_cmp(&(b.cell.alpha, b.cell.gamma, b.cell.lambda2, b.cell.rate))
                .unwrap_or(std::cmp::Ordering::Equal),
        )
    });
    out
}
