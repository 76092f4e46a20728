//! Experiment orchestration for the random-erasure lab: configuration,
//! cached stage pipeline, sweeps and reports.

pub mod config;
pub mod pipeline;
pub mod store;
pub mod sweep;

pub use config::ExperimentConfig;
pub use pipeline::{run_experiment, run_pipeline, RunOutcome, Stage};
pub use store::{Manifest, RunStatus, Store};
pub use sweep::{compare_schemes, render_report, sweep_ae, SummaryRow, SweepReport, TrendVerdict};

/// Process exit code for malformed or inconsistent configuration.
pub const EXIT_CONFIG: i32 = 2;
/// Process exit code for failures while running a stage.
pub const EXIT_RUNTIME: i32 = 3;

/// True when the error chain stems from configuration rather than execution.
pub fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        matches!(
            cause.downcast_ref::<relab_core::Error>(),
            Some(relab_core::Error::Config(_) | relab_core::Error::InvalidPolicy(_))
        ) || cause.downcast_ref::<toml::de::Error>().is_some()
    })
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if is_config_error(err) {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}
