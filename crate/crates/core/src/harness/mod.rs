//! Experiment harness: configuration, synthetic and tabular problem
//! families, the theory check, and reports.

pub mod config;
pub mod report;
pub mod run;
pub mod synthetic;
pub mod tabular;
pub mod theory;

pub use config::{ExperimentConfig, ExperimentKind};
pub use report::{clopper_pearson, normalized_metrics, safety_report, SafetyReport};
pub use run::{run_experiment, ExperimentOutcome, RunOptions};
