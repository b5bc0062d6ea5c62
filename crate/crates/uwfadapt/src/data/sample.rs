//! Sample-level types shared by every stage of the pipeline.

use crate::error::{Error, Result};
use crate::imgio::{MaskArray, RgbArray};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const CLASS_DIST_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
    GeneratedTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Detection,
    Segmentation,
}

/// Where a label came from. Generated images must never carry a plain
/// ground-truth payload; the ablation that attaches source ground truth to
/// generated samples tags it explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelOrigin {
    GroundTruth,
    Pseudo,
    Ablation,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
            Domain::GeneratedTarget => "generated_target",
        })
    }
}

impl FromStr for Domain {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Domain, String> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            "generated_target" => Ok(Domain::GeneratedTarget),
            other => Err(format!("unknown domain {other:?}")),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Classification => "classification",
            TaskKind::Detection => "detection",
            TaskKind::Segmentation => "segmentation",
        })
    }
}

impl FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<TaskKind, String> {
        match s {
            "classification" => Ok(TaskKind::Classification),
            "detection" => Ok(TaskKind::Detection),
            "segmentation" => Ok(TaskKind::Segmentation),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub class: usize,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub confidence: f64,
}

impl BoundingBox {
    pub fn validate(&self) -> Result<()> {
        if !(self.x_min < self.x_max && self.y_min < self.y_max) {
            return Err(Error::Invalid(format!(
                "degenerate box ({}, {}, {}, {})",
                self.x_min, self.y_min, self.x_max, self.y_max
            )));
        }
        let in_bounds = self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= 1.0 && self.y_max <= 1.0;
        if !in_bounds {
            return Err(Error::Invalid(format!(
                "box ({}, {}, {}, {}) outside [0,1] bounds",
                self.x_min, self.y_min, self.x_max, self.y_max
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Invalid(format!(
                "box confidence {} outside [0,1]",
                self.confidence
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let iy = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Task-specific label content. Segmentation masks may carry an ignore map
/// (1 = pixel excluded from the loss), produced by pixel-level filtering.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelData {
    ClassDist(Vec<f64>),
    Boxes(Vec<BoundingBox>),
    Mask {
        mask: MaskArray,
        ignore: Option<MaskArray>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelPayload {
    pub origin: LabelOrigin,
    pub data: LabelData,
}

impl LabelPayload {
    pub fn ground_truth(data: LabelData) -> LabelPayload {
        LabelPayload {
            origin: LabelOrigin::GroundTruth,
            data,
        }
    }

    pub fn class_index(&self) -> Option<usize> {
        match &self.data {
            LabelData::ClassDist(p) => {
                let mut best = 0;
                for (i, &v) in p.iter().enumerate() {
                    if v > p[best] {
                        best = i;
                    }
                }
                Some(best)
            }
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.data {
            LabelData::ClassDist(p) => {
                if p.is_empty() {
                    return Err(Error::Invalid("empty class distribution".into()));
                }
                if p.iter().any(|&v| v < 0.0) {
                    return Err(Error::Invalid("negative class probability".into()));
                }
                let sum: f64 = p.iter().sum();
                if (sum - 1.0).abs() > CLASS_DIST_TOL {
                    return Err(Error::Invalid(format!(
                        "class distribution sums to {sum}, expected 1"
                    )));
                }
            }
            LabelData::Boxes(boxes) => {
                for b in boxes {
                    b.validate()?;
                }
            }
            LabelData::Mask { mask, ignore } => {
                if mask.iter().any(|&v| v > 1) {
                    return Err(Error::Invalid("mask values must be 0 or 1".into()));
                }
                if let Some(ig) = ignore {
                    if ig.dim() != mask.dim() {
                        return Err(Error::Shape(format!(
                            "ignore map {:?} does not match mask {:?}",
                            ig.dim(),
                            mask.dim()
                        )));
                    }
                    if ig.iter().any(|&v| v > 1) {
                        return Err(Error::Invalid("ignore values must be 0 or 1".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One image plus its domain tag, task, and optional label.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    pub image: RgbArray,
    pub domain: Domain,
    pub task: TaskKind,
    pub label: Option<LabelPayload>,
}

impl ImageSample {
    pub fn validate(&self) -> Result<()> {
        if self.image.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::sample(&self.id, "image intensities outside [0,1]"));
        }
        if let Some(label) = &self.label {
            label
                .validate()
                .map_err(|e| Error::sample(&self.id, format!("bad label: {e}")))?;
            let matches_task = matches!(
                (self.task, &label.data),
                (TaskKind::Classification, LabelData::ClassDist(_))
                    | (TaskKind::Detection, LabelData::Boxes(_))
                    | (TaskKind::Segmentation, LabelData::Mask { .. })
            );
            if !matches_task {
                return Err(Error::sample(&self.id, "label kind does not match task"));
            }
            if self.domain == Domain::GeneratedTarget && label.origin == LabelOrigin::GroundTruth {
                return Err(Error::sample(
                    &self.id,
                    "generated samples cannot carry a ground-truth label",
                ));
            }
        }
        Ok(())
    }
}

/// Key used to stratify splits. Classification stratifies by argmax class,
/// detection by lesion presence plus modal box class, segmentation by the
/// quantized positive-area fraction, unlabeled samples form one stratum.
pub fn stratum_key(label: Option<&LabelPayload>) -> String {
    match label.map(|l| &l.data) {
        None => "unlabeled".to_string(),
        Some(LabelData::ClassDist(p)) => {
            let mut best = 0;
            for (i, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = i;
                }
            }
            format!("cls{best}")
        }
        Some(LabelData::Boxes(boxes)) => {
            if boxes.is_empty() {
                "det-normal".to_string()
            } else {
                let max_class = boxes.iter().map(|b| b.class).max().unwrap_or(0);
                let mut counts = vec![0usize; max_class + 1];
                for b in boxes {
                    counts[b.class] += 1;
                }
                let modal = counts
                    .iter()
                    .enumerate()
                    .max_by_key(|(_, &c)| c)
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                format!("det{modal}")
            }
        }
        Some(LabelData::Mask { mask, .. }) => {
            let total = mask.len().max(1);
            let positive = mask.iter().filter(|&&v| v == 1).count();
            let frac = positive as f64 / total as f64;
            let band = ((frac * 5.0).floor() as usize).min(4);
            format!("seg{band}")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    fn sample(domain: Domain, label: Option<LabelPayload>) -> ImageSample {
        ImageSample {
            id: "s0".into(),
            image: Array3::zeros((3, 4, 4)),
            domain,
            task: TaskKind::Classification,
            label,
        }
    }

    #[test]
    fn class_dist_must_sum_to_one() {
        let bad = LabelPayload::ground_truth(LabelData::ClassDist(vec![0.5, 0.4]));
        assert!(bad.validate().is_err());
        let good = LabelPayload::ground_truth(LabelData::ClassDist(vec![0.5, 0.5]));
        assert!(good.validate().is_ok());
    }

    #[test]
    fn generated_samples_reject_ground_truth_labels() {
        let label = LabelPayload::ground_truth(LabelData::ClassDist(vec![1.0, 0.0]));
        let s = sample(Domain::GeneratedTarget, Some(label.clone()));
        assert!(s.validate().is_err());

        let pseudo = LabelPayload {
            origin: LabelOrigin::Pseudo,
            ..label
        };
        let s = sample(Domain::GeneratedTarget, Some(pseudo));
        assert!(s.validate().is_ok());
    }

    #[test]
    fn box_validation_rejects_degenerate_and_out_of_bounds() {
        let flipped = BoundingBox {
            class: 0,
            x_min: 0.6,
            y_min: 0.1,
            x_max: 0.4,
            y_max: 0.2,
            confidence: 1.0,
        };
        assert!(flipped.validate().is_err());
        let outside = BoundingBox {
            x_min: 0.9,
            x_max: 1.1,
            ..flipped
        };
        assert!(outside.validate().is_err());
    }

    #[test]
    fn iou_of_identical_boxes_is_one() {
        let b = BoundingBox {
            class: 0,
            x_min: 0.2,
            y_min: 0.2,
            x_max: 0.6,
            y_max: 0.5,
            confidence: 1.0,
        };
        assert!((b.iou(&b) - 1.0).abs() < 1e-12);
        let far = BoundingBox {
            x_min: 0.7,
            x_max: 0.9,
            ..b
        };
        assert_eq!(b.iou(&far), 0.0);
    }

    #[test]
    fn strata_distinguish_label_kinds() {
        let cls = LabelPayload::ground_truth(LabelData::ClassDist(vec![0.1, 0.9]));
        assert_eq!(stratum_key(Some(&cls)), "cls1");
        let det = LabelPayload::ground_truth(LabelData::Boxes(vec![]));
        assert_eq!(stratum_key(Some(&det)), "det-normal");
        let seg = LabelPayload::ground_truth(LabelData::Mask {
            mask: Array2::ones((4, 4)),
            ignore: None,
        });
        assert_eq!(stratum_key(Some(&seg)), "seg4");
        assert_eq!(stratum_key(None), "unlabeled");
    }
}
