//! Experiment harness: JSON specs, dataset and metric files, and the drivers
//! behind the `egan` binary.

pub mod config;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod metrics;

pub use config::{ExperimentKind, ExperimentSpec, LossName, Overrides, StepSpec, SweepSpec, TargetSpec};
pub use dataset::{load_generator, save_generator, Dataset};
pub use error::{HarnessError, Result};
pub use experiments::{
    log_log_slope, run, run_generalization_sweep, run_population, run_training_experiment, RunOutput,
};
pub use metrics::{read_csv, write_csv, Metric, MetricRow};
