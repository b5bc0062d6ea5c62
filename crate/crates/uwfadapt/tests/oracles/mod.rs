//! Brute-force reference implementations, deliberately coded differently
//! from the library: an exhaustive assignment search for box matching and
//! a top-down band scan for grading.

use uwfadapt::data::BoundingBox;
use uwfadapt::eval::MatchCounts;
use uwfadapt::imgio::MaskArray;

/// Tries every injective prediction-to-ground-truth assignment and keeps
/// the one with the most matched pairs. Exponential, fine for <= 6 boxes.
pub fn exhaustive_lesion_counts(
    pred: &[BoundingBox],
    gt: &[BoundingBox],
    iou_threshold: f64,
) -> MatchCounts {
    fn best(
        pi: usize,
        pred: &[BoundingBox],
        gt: &[BoundingBox],
        iou_threshold: f64,
        used: &mut [bool],
    ) -> u64 {
        if pi == pred.len() {
            return 0;
        }
        let mut best_tp = best(pi + 1, pred, gt, iou_threshold, used);
        for gi in 0..gt.len() {
            if used[gi]
                || gt[gi].class != pred[pi].class
                || pred[pi].iou(&gt[gi]) < iou_threshold
            {
                continue;
            }
            used[gi] = true;
            best_tp = best_tp.max(1 + best(pi + 1, pred, gt, iou_threshold, used));
            used[gi] = false;
        }
        best_tp
    }
    let tp = best(0, pred, gt, iou_threshold, &mut vec![false; gt.len()]);
    MatchCounts {
        tp,
        fp: pred.len() as u64 - tp,
        fn_: gt.len() as u64 - tp,
    }
}

/// Counts pixels directly and scans the bands from the top: the grade is
/// the highest cutoff the ratio reaches. None when the fundus is empty.
pub fn grade_by_pixel_count(
    mask: &MaskArray,
    fundus: &MaskArray,
    cutoffs: [f64; 6],
) -> Option<usize> {
    let mut tessellated = 0u64;
    let mut area = 0u64;
    for (m, f) in mask.iter().zip(fundus.iter()) {
        if *f == 1 {
            area += 1;
            if *m == 1 {
                tessellated += 1;
            }
        }
    }
    if area == 0 {
        return None;
    }
    let ratio = tessellated as f64 / area as f64;
    Some((0..5).rev().find(|&k| ratio >= cutoffs[k]).unwrap_or(0))
}
