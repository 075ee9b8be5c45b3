//! Caching error against uncached runs, FLOPs accounting and sweeps.

mod flops;
mod lab;
mod run;

pub use flops::{
    attention_flops, block_flops, cell_flops, correction_flops, flops_estimate, mlp_flops,
    FlopsEstimate,
};
pub use lab::{
    apply_axis, parse_embedding, parse_placement, report_emit, sweep, Correction, Lab, PlanSummary,
    RunReport, ScheduleSummary, SweepAxis, REPORT_VERSION, SUMMARY_HEADER,
};
pub use run::{cached_run, compare, oracle_run, CapturedRun, Comparison, DeviationRecord};
