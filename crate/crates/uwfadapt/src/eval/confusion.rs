//! Confusion matrix with rows = ground truth, columns = prediction.

use crate::error::{Error, Result};
use ndarray::Array2;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

/// Both averaging rules are reported because per-class tables and headline
/// averages in the literature do not always use the same one.
#[derive(Debug, Clone)]
pub struct AccuracySummary {
    pub per_class: Vec<Option<f64>>,
    /// Unweighted mean over classes that have samples.
    pub class_mean: f64,
    /// trace / total: the sample-weighted overall accuracy.
    pub overall: f64,
    pub warnings: Vec<String>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            counts: Array2::zeros((classes, classes)),
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.dim().0
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[[truth, pred]] += 1;
    }

    pub fn from_pairs(classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new(classes);
        for (t, p) in pairs {
            cm.record(t, p);
        }
        cm
    }

    pub fn from_counts(counts: Array2<u64>) -> Result<ConfusionMatrix> {
        let (r, c) = counts.dim();
        if r != c {
            return Err(Error::Shape(format!("confusion matrix {r}x{c} is not square")));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[[i, i]]).sum()
    }

    /// trace / total; 0 for an empty matrix.
    pub fn overall_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }
}

/// Per-class accuracy (diagonal over row sum) and its unweighted mean.
/// Classes with no samples are excluded from the mean and reported as
/// warnings.
pub fn mean_and_per_class_accuracy(cm: &ConfusionMatrix) -> AccuracySummary {
    let mut per_class = Vec::with_capacity(cm.classes());
    let mut warnings = Vec::new();
    let mut sum = 0.0;
    let mut counted = 0usize;
    for i in 0..cm.classes() {
        let row_sum: u64 = cm.counts().row(i).sum();
        if row_sum == 0 {
            warnings.push(format!("class {i} has no samples; excluded from mean"));
            per_class.push(None);
            continue;
        }
        let acc = cm.counts()[[i, i]] as f64 / row_sum as f64;
        per_class.push(Some(acc));
        sum += acc;
        counted += 1;
    }
    let class_mean = if counted == 0 { 0.0 } else { sum / counted as f64 };
    AccuracySummary {
        per_class,
        class_mean,
        overall: cm.overall_accuracy(),
        warnings,
    }
}
