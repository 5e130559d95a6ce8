//! Experiment plumbing: configurations and the scenario registry, dataset files,
//! training and evaluation runs, CSV reports, and the odometry localization pipeline.

pub mod config;
pub mod data;
pub mod nclt;
pub mod report;
pub mod run;

pub use config::{builtin, ExperimentConfig, MethodSpec, ModelSpec, SCENARIOS};
pub use data::{generate, Manifest};
pub use report::{compare, read_report, write_provenance, write_report, ReportRow};
pub use run::{evaluate_all, train_all};
