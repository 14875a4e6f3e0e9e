//! Monte-Carlo study harness: configuration, the study runner, record
//! files, summary tables and box plots.

pub mod config;
pub mod method;
pub mod plots;
pub mod records;
pub mod study;
pub mod tables;

pub use config::{MissingnessEntry, StudyConfig};
pub use method::Method;
pub use records::{read_records, FitRecord};
pub use study::{run_study, CellFilter, RunOptions, RunSummary};
