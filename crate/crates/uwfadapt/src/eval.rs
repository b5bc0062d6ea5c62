//! Metrics: confusion matrices, per-class and mean accuracy, detection
//! precision/recall/F1 at lesion and image level, and tessellation grading.

pub mod confusion;
pub mod detection;
pub mod grading;
pub mod metrics;
pub mod report;

pub use confusion::{mean_and_per_class_accuracy, AccuracySummary, ConfusionMatrix};
pub use detection::{match_detections, match_image_level, DetectionMatchSpec, MatchCounts, MatchLevel};
pub use grading::{grading_accuracy, tessellation_grade, TessellationGrader};
pub use metrics::{f1_from_pr, precision_recall_f1};
pub use report::{render_confusion, write_metrics_csv};
