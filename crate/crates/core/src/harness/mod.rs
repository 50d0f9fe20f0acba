//! Experiment configuration, metrics, CSV output and the experiment drivers.
//!
//! Configs are line-oriented `section.key = value` text with `#` comments;
//! see [`ExperimentConfig`] for the keys. Every CSV written here starts with
//! a header and carries the config hash and seed on each row.

mod checks;
mod config;
mod experiments;
mod gradcheck;
mod metrics;

pub use checks::{check_convergence, check_gap, check_length, check_lorenz, check_online, Check};
pub use config::{noise_from_variances_db, ExperimentConfig, GammaScaling, ModelSpec, OnlineExperiment};
pub use experiments::{
    baseline_name, compare_on, final_quarter_db, initial_params, knet_estimates, make_splits, run_convergence, run_generalization,
    run_lorenz, run_mse_curve, run_online, sub_seed, windows_of, ConvergenceRun, CurveRun, GridPoint, OnlineRun,
    Splits,
};
pub use gradcheck::{
    gradcheck, max_relative_error, numeric_gradient, relative_error, GradcheckCase, GradcheckReport, DEFAULT_TOLERANCE,
};
pub use metrics::{mse_db, mse_linear, write_curves_csv, write_windows_csv, CsvMeta, MetricReport, MetricRow, MseDb};
