//! Training losses, segmentation metrics, and calcium scoring.

pub mod calcium;
pub mod losses;
pub mod metrics;

pub use calcium::{calcium_components, score_calcium, CalciumReport, Component, LabeledVolume, CALCIUM_HU_THRESHOLD};
pub use losses::{dice_loss, dice_loss_t, focal_loss, focal_loss_t, mixed_loss_t, segmentation_loss_t, LossConfig, LossKind};
pub use metrics::{count_confusion, evaluate_slices, metrics_from_counts, Counts, MetricValues, MetricsReport, PatientMetrics};
