//! Evaluation: confusion metrics, FLOP accounting and plots.

mod flops;
mod metrics;
pub mod plots;

pub use flops::{flops_estimate, window_attention_macs, FlopReport, StageFlops};
pub use metrics::{
    class_metrics, confusion, metrics, Averaged, ClassCounts, ClassMetrics, ConfusionCounts, MetricReport,
};
