//! Batch experiment driver: strict configs, dispatch and reports.

pub mod config;
pub mod experiments;
pub mod oracle;
pub mod report;

pub use config::{ExperimentConfig, ExperimentKind, FieldSpec};
pub use experiments::{run, run_experiment, RunOutcome};
pub use oracle::{oracle_suite, OracleRow};
pub use report::{Detail, Report, ReportRow};
