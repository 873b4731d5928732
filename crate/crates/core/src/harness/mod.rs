//! Experiment orchestration: config ingestion, sweep recipes, the run
//! registry and report files.

pub mod config;
pub mod experiments;
pub mod report;

pub use config::{ExperimentGrid, ExperimentKind, ModelSpec, OperatorSpec, RunConfig};
pub use experiments::{
    assumption_report, drift_source, fit_slopes, run_convergence_experiment, run_ldp_experiment,
    run_mixing_experiment, run_picard_experiment, ConvergenceReport, ErrorRow, LdpReport, SlopeFit,
};
pub use report::{emit_report, errors_csv, rates_csv, RunRecord, RunStatus, Summary};
