use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use ssm_impute::missingness::{calibrate_intercept, realized_rate, apply_spec, Mechanism, MissingnessSpec};
use ssm_impute::model::{make_condition, simulate};
use ssm_impute::seed::{derive_seed, stage};
use ssm_impute_harness::plots::{emit_plots, PlotSpec};
use ssm_impute_harness::tables::{emit_tables, TableOptions};
use ssm_impute_harness::{read_records, run_study, CellFilter, RunOptions, StudyConfig};

#[derive(Parser)]
#[command(name = "ssm-impute", version, about = "Missing-data study for state-space models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the simulation study.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Restrict conditions, e.g. "sigma2=0.25,alpha=0.7".
        #[arg(long)]
        cells: Option<CellFilter>,
        /// Override the number of replications.
        #[arg(long)]
        reps: Option<usize>,
        /// Continue an interrupted run in the same output directory.
        #[arg(long)]
        resume: bool,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write summary tables from a results directory.
    Tables {
        #[arg(long)]
        records: PathBuf,
        /// Defaults to `<records>/tables`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Leave out fits that did not converge.
        #[arg(long)]
        exclude_failed: bool,
        #[arg(long, default_value_t = 1.0)]
        outlier_cutoff: f64,
    },
    /// Draw bias box plots from a results directory.
    Plots {
        #[arg(long)]
        records: PathBuf,
        /// Defaults to `<records>/plots`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        y_limit: f64,
    },
    /// Calibrate a mechanism's intercept to a target rate.
    Calibrate {
        #[arg(long)]
        mechanism: Mechanism,
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value_t = 0.25)]
        sigma2: f64,
        #[arg(long, default_value_t = 0.7)]
        alpha: f64,
        #[arg(long, default_value_t = 0.0)]
        gamma: f64,
        /// Slope; defaults to the published value for the mechanism.
        #[arg(long, allow_hyphen_values = true)]
        slope: Option<f64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Replications of T = 500 used to check the achieved rate.
        #[arg(long, default_value_t = 100)]
        check_reps: usize,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run { config, cells, reps, resume, out } => {
            let mut cfg = StudyConfig::load(&config)?;
            if let Some(r) = reps {
                cfg.replications = r;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let summary = run_study(&cfg, &RunOptions { cells, resume })?;
            println!(
                "{} unit(s) run, {} skipped, {} record(s) written, {} from failed analyses -> {}",
                summary.units_run,
                summary.units_skipped,
                summary.records_written,
                summary.failures,
                cfg.output_dir.display()
            );
        }
        Command::Tables { records, out, exclude_failed, outlier_cutoff } => {
            let recs = read_records(&records)?;
            let out = out.unwrap_or_else(|| records.join("tables"));
            let files = emit_tables(&recs, &out, &TableOptions { outlier_cutoff, exclude_failed })?;
            println!("{} table file(s) written to {}", files.len(), out.display());
        }
        Command::Plots { records, out, y_limit } => {
            let recs = read_records(&records)?;
            let out = out.unwrap_or_else(|| records.join("plots"));
            let files = emit_plots(&recs, &out, &PlotSpec { y_limit, ..PlotSpec::default() })?;
            println!("{} plot file(s) written to {}", files.len(), out.display());
        }
        Command::Calibrate { mechanism, rate, sigma2, alpha, gamma, slope, seed, check_reps } => {
            let params = make_condition(sigma2, alpha, gamma)?;
            let preset = MissingnessSpec::preset(mechanism, rate)?;
            let spec = if mechanism == Mechanism::Mcar {
                preset
            } else {
                let slope = slope.unwrap_or(preset.beta_slope);
                calibrate_intercept(mechanism, &params, rate, slope, derive_seed(seed, &[stage::CALIBRATE]))
                    .context("calibration failed")?
            };
            let mut total = 0.0;
            for r in 0..check_reps {
                let raw = simulate(&params, 500, derive_seed(seed, &[stage::SIMULATE, r as u64]), 100)?;
                let masked = apply_spec(&raw, &spec, derive_seed(seed, &[stage::MISSINGNESS, r as u64]))?;
                total += realized_rate(&masked);
            }
            println!("{}", serde_json::to_string_pretty(&spec)?);
            if check_reps > 0 {
                println!("mean achieved rate over {check_reps} series of T = 500: {:.4}", total / check_reps as f64);
            }
        }
    }
    Ok(())
}
