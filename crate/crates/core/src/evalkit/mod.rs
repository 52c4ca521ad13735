//! Losses, metrics and dataset-level aggregation.

pub mod losses;
pub mod metrics;
mod report;

pub use losses::{bce_graph, bce_loss, dice_graph, dice_loss, text_loss, text_loss_graph, BCE_EPS, DICE_EPS};
pub use metrics::{auc, iou_at, iou_thresholds, kld, mae, miou, sim, KLD_EPS};
pub use report::{
    evaluate_dataset, report_from_samples, sample_metrics, Aggregate, IouMode, MetricReport, SampleKey, SampleMetrics,
    ScoredSample, Summary, REPORT_SCHEMA_VERSION,
};
