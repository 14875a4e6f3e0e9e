//! State-space estimation under missing data: simulation, missingness
//! mechanisms, Kalman filtering, maximum likelihood, and two imputation
//! front-ends (EM with level models, and MICE with predictive mean matching).

pub mod em;
pub mod error;
pub mod estimator;
pub mod kalman;
pub mod linalg;
pub mod metrics;
pub mod mice;
pub mod missingness;
pub mod model;
pub mod seed;

pub use error::{Error, Result};
pub use kalman::{filter_series, measurement_update, time_update, FilterOutput, FilterState};
pub use missingness::{apply_mcar, apply_mechanism, apply_spec, calibrate_intercept, Mechanism, MissingnessSpec};
pub use model::{make_condition, simulate, stationary_covariance, LatentTrajectory, MaskedSeries, ModelParams};
pub use estimator::{default_init, fit_mle, neg_loglik, FitOptions, FitResult, ParamVector};
pub use em::{em_conditional_fill, em_impute, estimate_levels, EmConfig, EmResult, LevelModel};
pub use metrics::{median_bias, median_abs_rel_bias, coverage, summarize_cell, summarize_param, BoxStats, CellId, CellSummary, ParamSummary, Replicate};
pub use mice::{mice_chain, pmm_impute_column, rubin_pool, ImputationSet, MiceConfig, MiceVariant, PooledFit, SameTimePredictors};
