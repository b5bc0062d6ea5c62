//! Plain-text report rendering and metric CSV output.

use crate::error::{Error, Result};
use crate::eval::confusion::ConfusionMatrix;
use std::path::Path;

/// Fixed-width text block, rows = ground truth, columns = prediction.
pub fn render_confusion(cm: &ConfusionMatrix) -> String {
    let c = cm.classes();
    let width = cm
        .counts()
        .iter()
        .map(|v| v.to_string().len())
        .max()
        .unwrap_or(1)
        .max(4);
    let mut out = String::new();
    out.push_str(&format!("{:>6} |", "gt\\pr"));
    for j in 0..c {
        out.push_str(&format!(" {j:>width$}"));
    }
    out.push('\n');
    out.push_str(&format!("{:-<7}+{:-<1$}\n", "", (width + 1) * c));
    for i in 0..c {
        out.push_str(&format!("{i:>6} |"));
        for j in 0..c {
            out.push_str(&format!(" {:>width$}", cm.counts()[[i, j]]));
        }
        out.push('\n');
    }
    out
}

/// Writes `metric,value` rows.
pub fn write_metrics_csv(path: &Path, metrics: &[(&str, f64)]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut body = String::from("metric,value\n");
    for (name, value) in metrics {
        body.push_str(&format!("{name},{value}\n"));
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendered_block_contains_all_counts() {
        let cm = ConfusionMatrix::from_pairs(3, [(0, 0), (1, 2), (2, 2), (2, 2)]);
        let text = render_confusion(&cm);
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().last().unwrap().contains('2'));
    }

    #[test]
    fn metrics_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&path, &[("accuracy", 0.75), ("f1", 0.5)]).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        assert_eq!(body, "metric,value\naccuracy,0.75\nf1,0.5\n");
    }
}
