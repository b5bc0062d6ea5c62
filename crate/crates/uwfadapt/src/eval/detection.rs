//! Detection matching at two levels. Lesion level pairs predictions with
//! ground-truth boxes of the same class at sufficient IoU, maximizing the
//! number of matched pairs; image level only asks whether a class is present
//! at all.

use crate::data::sample::BoundingBox;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchLevel {
    Lesion,
    Image,
}

#[derive(Debug, Clone, Copy)]
pub struct DetectionMatchSpec {
    pub iou_threshold: f64,
    pub level: MatchLevel,
}

impl DetectionMatchSpec {
    pub fn lesion(iou_threshold: f64) -> Result<DetectionMatchSpec> {
        if !(0.0..1.0).contains(&iou_threshold) || iou_threshold == 0.0 {
            return Err(Error::Config(format!(
                "IoU threshold {iou_threshold} must lie in (0, 1)"
            )));
        }
        Ok(DetectionMatchSpec {
            iou_threshold,
            level: MatchLevel::Lesion,
        })
    }

    pub fn image() -> DetectionMatchSpec {
        DetectionMatchSpec {
            iou_threshold: 0.3,
            level: MatchLevel::Image,
        }
    }
}

impl Default for DetectionMatchSpec {
    fn default() -> DetectionMatchSpec {
        DetectionMatchSpec {
            iou_threshold: 0.3,
            level: MatchLevel::Lesion,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl MatchCounts {
    pub fn add(&mut self, other: MatchCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Matches one image's predictions against its ground truth.
pub fn match_detections(
    pred: &[BoundingBox],
    gt: &[BoundingBox],
    spec: &DetectionMatchSpec,
) -> MatchCounts {
    match spec.level {
        MatchLevel::Lesion => match_lesion_level(pred, gt, spec.iou_threshold),
        MatchLevel::Image => match_image_level(pred, gt),
    }
}

/// Maximum-cardinality matching via augmenting paths. A greedy sweep in
/// confidence order can strand a matchable pair (a flexible prediction
/// claims the only ground truth a rigid one could take); maximizing makes
/// TP independent of prediction order and confidence ties.
fn match_lesion_level(pred: &[BoundingBox], gt: &[BoundingBox], iou_threshold: f64) -> MatchCounts {
    let compatible: Vec<Vec<usize>> = pred
        .iter()
        .map(|p| {
            gt.iter()
                .enumerate()
                .filter(|(_, g)| g.class == p.class && p.iou(g) >= iou_threshold)
                .map(|(gi, _)| gi)
                .collect()
        })
        .collect();

    fn augment(
        pi: usize,
        compatible: &[Vec<usize>],
        owner: &mut [Option<usize>],
        visited: &mut [bool],
    ) -> bool {
        for &gi in &compatible[pi] {
            if visited[gi] {
                continue;
            }
            visited[gi] = true;
            if owner[gi].is_none_or(|prev| augment(prev, compatible, owner, visited)) {
                owner[gi] = Some(pi);
                return true;
            }
        }
        false
    }

    let mut owner: Vec<Option<usize>> = vec![None; gt.len()];
    let mut tp = 0u64;
    for pi in 0..pred.len() {
        let mut visited = vec![false; gt.len()];
        if augment(pi, &compatible, &mut owner, &mut visited) {
            tp += 1;
        }
    }
    MatchCounts {
        tp,
        fp: pred.len() as u64 - tp,
        fn_: gt.len() as u64 - tp,
    }
}

/// Image level: one count per class present in either list. TP when the class
/// appears in both prediction and ground truth, FP when predicted only, FN
/// when ground truth only.
pub fn match_image_level(pred: &[BoundingBox], gt: &[BoundingBox]) -> MatchCounts {
    let classes: std::collections::BTreeSet<usize> = pred
        .iter()
        .chain(gt.iter())
        .map(|b| b.class)
        .collect();
    let mut counts = MatchCounts::default();
    for class in classes {
        let in_pred = pred.iter().any(|b| b.class == class);
        let in_gt = gt.iter().any(|b| b.class == class);
        match (in_pred, in_gt) {
            (true, true) => counts.tp += 1,
            (true, false) => counts.fp += 1,
            (false, true) => counts.fn_ += 1,
            (false, false) => unreachable!(),
        }
    }
    counts
}
