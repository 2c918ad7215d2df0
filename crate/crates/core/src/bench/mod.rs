//! Synthetic monotone-regression benchmark: test functions, data generation, metrics,
//! the multi-trial harness and the uncertainty sweep.

mod dataset;
mod functions;
mod harness;
mod metrics;
mod sweep;

pub use dataset::{make_dataset, sinc, sinc_dataset, truth};
pub use functions::{
    eval_function, BenchmarkFunction, Reference, DOMAIN, PUBLISHED_ELPD_N100, PUBLISHED_GP_RMSE_N100, PUBLISHED_RMSE_N100, PUBLISHED_RMSE_N15,
};
pub use harness::{
    canonical_json, default_grid, refit_selected, run_benchmark, run_trial, trial_path, validation_elbo, write_atomic,
    BenchmarkConfig, BenchmarkReport, EntryResult, FunctionAggregate, GridEntry, RunOptions, Summary, Timings, TrialRecord,
    TrialSeeds,
};
pub use metrics::{elpd, elpd_from_draws, log_mean_exp, rmse};
pub use sweep::{bands_to_csv, uncertainty_sweep, SweepBand, SweepConfig};
