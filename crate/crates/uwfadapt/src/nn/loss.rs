//! Scalar losses with analytic gradients. Every function returns the loss
//! value together with the gradient w.r.t. its first argument.

use super::Batch;
use ndarray::{Array2, Array4, Axis};

const EPS: f64 = 1e-12;

/// Mean squared error against a constant target, averaged over all elements.
/// The adversarial term of a least-squares GAN is this with target 1 or 0.
pub fn mse_to_const(x: &Batch, target: f64) -> (f64, Batch) {
    let n = x.len() as f64;
    let diff = x.mapv(|v| v - target);
    let loss = diff.mapv(|v| v * v).sum() / n;
    let grad = diff.mapv(|v| 2.0 * v / n);
    (loss, grad)
}

/// Mean absolute error between two batches of equal shape.
pub fn l1_pair(x: &Batch, target: &Batch) -> (f64, Batch) {
    assert_eq!(x.dim(), target.dim(), "l1_pair shape mismatch");
    let n = x.len() as f64;
    let diff = x - target;
    let loss = diff.mapv(f64::abs).sum() / n;
    let grad = diff.mapv(|v| v.signum() / n);
    (loss, grad)
}

/// Pixelwise binary cross entropy between predicted probabilities and 0/1
/// targets, with an optional ignore mask (1 = count the pixel, 0 = skip it).
/// Averaged over counted pixels.
pub fn bce_map(pred: &Batch, target: &Batch, count: Option<&Batch>) -> (f64, Batch) {
    assert_eq!(pred.dim(), target.dim(), "bce_map shape mismatch");
    let ones;
    let count = match count {
        Some(c) => {
            assert_eq!(c.dim(), pred.dim(), "bce_map mask shape mismatch");
            c
        }
        None => {
            ones = Array4::<f64>::ones(pred.dim());
            &ones
        }
    };
    let total = count.sum();
    if total == 0.0 {
        return (0.0, Array4::zeros(pred.dim()));
    }
    let mut loss = 0.0;
    let mut grad = Array4::<f64>::zeros(pred.dim());
    for (i, (&p, (&t, &m))) in pred
        .iter()
        .zip(target.iter().zip(count.iter()))
        .enumerate()
    {
        if m == 0.0 {
            continue;
        }
        let p = p.clamp(EPS, 1.0 - EPS);
        loss -= m * (t * p.ln() + (1.0 - t) * (1.0 - p).ln());
        let g = m * (p - t) / (p * (1.0 - p)) / total;
        // iter order matches the standard layout used throughout
        let idx = {
            let (_n, c, h, w) = pred.dim();
            let ni = i / (c * h * w);
            let rem = i % (c * h * w);
            let ci = rem / (h * w);
            let rem = rem % (h * w);
            (ni, ci, rem / w, rem % w)
        };
        grad[[idx.0, idx.1, idx.2, idx.3]] = g;
    }
    (loss / total, grad)
}

/// Pixelwise squared error with an optional count mask (1 = count, 0 = skip),
/// averaged over counted elements. Mirrors [`bce_map`].
pub fn mse_map(pred: &Batch, target: &Batch, count: Option<&Batch>) -> (f64, Batch) {
    assert_eq!(pred.dim(), target.dim(), "mse_map shape mismatch");
    let ones;
    let count = match count {
        Some(c) => {
            assert_eq!(c.dim(), pred.dim(), "mse_map mask shape mismatch");
            c
        }
        None => {
            ones = Array4::<f64>::ones(pred.dim());
            &ones
        }
    };
    let total = count.sum();
    if total == 0.0 {
        return (0.0, Array4::zeros(pred.dim()));
    }
    let mut loss = 0.0;
    let mut grad = Array4::<f64>::zeros(pred.dim());
    ndarray::Zip::indexed(pred)
        .and(target)
        .and(count)
        .for_each(|idx, &p, &t, &m| {
            if m == 0.0 {
                return;
            }
            let d = p - t;
            loss += m * d * d;
            grad[idx] = 2.0 * m * d / total;
        });
    (loss / total, grad)
}

/// Cross entropy between one-hot labels and predicted class probabilities,
/// averaged over rows. Rows are samples, columns are classes.
pub fn cross_entropy_probs(probs: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let (n, c) = probs.dim();
    assert_eq!(n, labels.len(), "cross_entropy label count mismatch");
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros((n, c));
    for (i, &lab) in labels.iter().enumerate() {
        assert!(lab < c, "label {lab} out of range for {c} classes");
        let p = probs[[i, lab]].max(EPS);
        loss -= p.ln();
        grad[[i, lab]] = -1.0 / (p * n as f64);
    }
    (loss / n as f64, grad)
}

/// Cross entropy `-sum_c t_c * ln(p_c)` against soft target rows, averaged
/// over rows. Reduces to the hard-label version when targets are one-hot.
pub fn cross_entropy_soft(probs: &Array2<f64>, targets: &Array2<f64>) -> (f64, Array2<f64>) {
    let (n, c) = probs.dim();
    assert_eq!(targets.dim(), (n, c), "cross_entropy_soft shape mismatch");
    if n == 0 {
        return (0.0, Array2::zeros((0, c)));
    }
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros((n, c));
    for i in 0..n {
        for j in 0..c {
            let t = targets[[i, j]];
            if t == 0.0 {
                continue;
            }
            let p = probs[[i, j]].max(EPS);
            loss -= t * p.ln();
            // clamped region is flat; matches the finite-difference view
            if probs[[i, j]] > EPS {
                grad[[i, j]] = -t / (p * n as f64);
            }
        }
    }
    (loss / n as f64, grad)
}

/// Masked consistency term: `(1/U) * sum_u mask_u * ||q_u - p_u||^2` where the
/// squared norm is summed over the class dimension and `U` counts the rows
/// that pass the mask. Dropping a masked-out row therefore leaves the value
/// bit-identical. The gradient is taken w.r.t. `p`; `q` is held fixed.
pub fn l2_rowsum_masked(q: &Array2<f64>, p: &Array2<f64>, mask: &[bool]) -> (f64, Array2<f64>) {
    let (n, c) = p.dim();
    assert_eq!(q.dim(), (n, c), "l2_rowsum shape mismatch");
    assert_eq!(mask.len(), n, "l2_rowsum mask length mismatch");
    let kept = mask.iter().filter(|&&m| m).count();
    if kept == 0 {
        return (0.0, Array2::zeros((n, c)));
    }
    let scale = 1.0 / kept as f64;
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros((n, c));
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        for j in 0..c {
            let d = q[[i, j]] - p[[i, j]];
            loss += d * d * scale;
            grad[[i, j]] = -2.0 * d * scale;
        }
    }
    (loss, grad)
}

/// Flattens a `(n, c, 1, 1)` batch (a classifier head output) into `(n, c)`.
pub fn probs_matrix(x: &Batch) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    assert_eq!((h, w), (1, 1), "expected (n, c, 1, 1) head output");
    let mut out = Array2::<f64>::zeros((n, c));
    for i in 0..n {
        for j in 0..c {
            out[[i, j]] = x[[i, j, 0, 0]];
        }
    }
    out
}

/// Inverse of [`probs_matrix`]: lifts `(n, c)` back into `(n, c, 1, 1)` so a
/// matrix-space gradient can flow back into a conv head.
pub fn probs_to_batch(m: &Array2<f64>) -> Batch {
    let (n, c) = m.dim();
    let mut out = Array4::<f64>::zeros((n, c, 1, 1));
    for i in 0..n {
        for j in 0..c {
            out[[i, j, 0, 0]] = m[[i, j]];
        }
    }
    out
}

/// Row-wise argmax and max value; used for confidence thresholding.
pub fn row_max(m: &Array2<f64>) -> Vec<(usize, f64)> {
    m.axis_iter(Axis(0))
        .map(|row| {
            let mut best = (0usize, f64::NEG_INFINITY);
            for (j, &v) in row.iter().enumerate() {
                if v > best.1 {
                    best = (j, v);
                }
            }
            best
        })
        .collect()
}
