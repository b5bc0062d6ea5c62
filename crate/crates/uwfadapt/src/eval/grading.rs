//! Tessellation grading: the ratio of tessellated area to fundus area is
//! bucketed into 5 grade bands.

use crate::error::{Error, Result};
use crate::eval::confusion::ConfusionMatrix;
use crate::imgio::MaskArray;

/// Cutoffs c0..c5 delimiting the 5 bands. Bands are half-open [c_k, c_{k+1})
/// so every ratio maps to exactly one grade; any ratio at or above c4 is
/// grade 4.
#[derive(Debug, Clone, PartialEq)]
pub struct TessellationGrader {
    cutoffs: [f64; 6],
}

impl Default for TessellationGrader {
    fn default() -> TessellationGrader {
        TessellationGrader::new([0.0, 0.05, 0.20, 0.40, 0.60, 1.0]).unwrap()
    }
}

impl TessellationGrader {
    pub fn new(cutoffs: [f64; 6]) -> Result<TessellationGrader> {
        if cutoffs[0] != 0.0 || cutoffs[5] != 1.0 {
            return Err(Error::Config("grade cutoffs must start at 0 and end at 1".into()));
        }
        if cutoffs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "grade cutoffs {cutoffs:?} must be strictly increasing"
            )));
        }
        Ok(TessellationGrader { cutoffs })
    }

    pub fn cutoffs(&self) -> [f64; 6] {
        self.cutoffs
    }

    pub fn grade_ratio(&self, ratio: f64) -> usize {
        for k in 0..4 {
            if ratio < self.cutoffs[k + 1] {
                return k;
            }
        }
        4
    }
}

/// Area ratio AoT/AoF with the tessellated area counted only inside the
/// fundus support.
pub fn tessellation_grade(
    mask: &MaskArray,
    fundus: &MaskArray,
    grader: &TessellationGrader,
) -> Result<usize> {
    if mask.dim() != fundus.dim() {
        return Err(Error::Shape(format!(
            "mask {:?} vs fundus {:?}",
            mask.dim(),
            fundus.dim()
        )));
    }
    let mut aot = 0u64;
    let mut aof = 0u64;
    for (&m, &f) in mask.iter().zip(fundus.iter()) {
        if f == 1 {
            aof += 1;
            if m == 1 {
                aot += 1;
            }
        }
    }
    if aof == 0 {
        return Err(Error::Invalid("fundus mask has zero area".into()));
    }
    Ok(grader.grade_ratio(aot as f64 / aof as f64))
}

/// Grades each predicted mask and compares with the grade of its ground-truth
/// mask. Returns grading accuracy plus the 5x5 confusion matrix.
pub fn grading_accuracy(
    pred_masks: &[MaskArray],
    gt_masks: &[MaskArray],
    fundus_masks: &[MaskArray],
    grader: &TessellationGrader,
) -> Result<(f64, ConfusionMatrix)> {
    if pred_masks.len() != gt_masks.len() || pred_masks.len() != fundus_masks.len() {
        return Err(Error::Invalid(format!(
            "mismatched counts: {} pred, {} gt, {} fundus",
            pred_masks.len(),
            gt_masks.len(),
            fundus_masks.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(5);
    for ((pred, gt), fundus) in pred_masks.iter().zip(gt_masks).zip(fundus_masks) {
        let truth = tessellation_grade(gt, fundus, grader)?;
        let predicted = tessellation_grade(pred, fundus, grader)?;
        cm.record(truth, predicted);
    }
    Ok((cm.overall_accuracy(), cm))
}
