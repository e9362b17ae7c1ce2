//! Closed-loop scenarios, their traces and the scores computed from them.

mod metrics;
mod run;
mod sweep;
mod trace;

pub use metrics::{
    classify_injection, compute_metrics, injection_window, InjectionOutcome, Metrics,
    BLEB_FRACTION, VITREOUS_FRACTION,
};
pub use run::{run_scenario, run_scenario_with, ControlUpdate, Phase, RunOptions, RunOutput};
pub use sweep::{config_hash, parse_sweep, sweep, write_metrics_csv, SweepRow, METRICS_HEADER};
pub use trace::{Event, Events, Trace, TraceRow, TRACE_HEADER};
