//! Experiment orchestration: specs, job scheduling with resumable progress,
//! the four protocols, and CSV/PNG/JSON outputs.
mod jobs;
mod output;
mod protocols;
mod spec;

pub use jobs::{run_pool, Progress};
pub use output::{export_csv, export_loss_curve, export_png, read_csv, records_to_csv, Logger, MetricsRecord, CSV_HEADER};
pub use protocols::{
    audited_parameters, eval_seed_list, fmt_value, major_axis_profile, respects_locality, run_capacity, run_growth,
    run_infotrade, run_protocol, run_robustness, zero_outside, Experiment, TrainResult,
};
pub use spec::{default_eval_fire_rates, ExperimentSpec, ModelOverrides, Protocol, Scale, TargetSource, TrainOverrides};
