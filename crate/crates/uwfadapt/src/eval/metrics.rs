//! Precision, recall, F1. Zero denominators yield 0 so the functions are
//! total.

pub fn precision_recall_f1(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    (precision, recall, f1_from_pr(precision, recall))
}

pub fn f1_from_pr(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_pr_pairs_give_expected_f1() {
        // (P%, R%) -> F1% reference triples
        for (p, r, f1) in [
            (5.07, 87.30, 9.58),
            (30.48, 94.88, 46.14),
            (52.11, 91.01, 66.27),
        ] {
            let got = f1_from_pr(p / 100.0, r / 100.0) * 100.0;
            assert!((got - f1).abs() <= 0.01, "({p}, {r}): got {got}, want {f1}");
        }
    }

    #[test]
    fn equal_precision_and_recall_give_f1_equal_to_both() {
        for v in [0.1, 0.5, 0.934] {
            assert!((f1_from_pr(v, v) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_denominators_yield_zero() {
        assert_eq!(precision_recall_f1(0, 0, 0), (0.0, 0.0, 0.0));
        assert_eq!(precision_recall_f1(0, 0, 5).0, 0.0);
        assert_eq!(precision_recall_f1(0, 5, 0).1, 0.0);
    }

    #[test]
    fn counts_translate_to_fractions() {
        let (p, r, _) = precision_recall_f1(6, 2, 3);
        assert!((p - 0.75).abs() < 1e-12);
        assert!((r - 6.0 / 9.0).abs() < 1e-12);
    }
}
