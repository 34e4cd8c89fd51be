//! Experiment harness: configs, filter runners, metrics, reports, sweeps.

pub mod config;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod report;
pub mod runner;

pub use config::{preset, ExperimentConfig, FilterSpec, MetricSpec, TrainingSpec, PRESETS};
pub use error::{HarnessError, Result};
pub use experiment::{run_experiment, sweep, ExperimentOutput, SweepReport};
pub use report::{MetricReport, MetricRow};
