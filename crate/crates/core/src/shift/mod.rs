//! Variance metrics and the shifting procedure.

pub mod certificate;
pub mod metric;
pub mod procedure;

pub use certificate::{brute_force_delta_star, certify_stop, BruteForce, StopCertificate};
pub use metric::{metric_eval, select_f, MetricModel, MetricSpec, Weights};
pub use procedure::{
    dispatch_metric, max_step, run_procedure, ShiftOptions, ShiftRecord, ShiftTrace, StepResult,
    StopReason,
};
