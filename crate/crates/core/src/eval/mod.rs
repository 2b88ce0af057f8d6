//! Linear probing, clustering metrics and run reports.

mod metrics;
mod probe;
mod report;
pub mod svg;

pub use metrics::{class_coherence, cluster_mi, cluster_top1};
pub use probe::{linear_probe, probe_features, probe_on_features, ProbeResult};
pub use report::{
    compare_runs, emit_report, method_of, probe_run, read_evals, stage_epochs, EvalEntry, MetricRecord, Report,
    EVALS_FILE, METRICS_FILE, REPORT_FILE,
};
