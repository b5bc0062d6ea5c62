//! Randomized invariants for the metric, filtering, and preprocessing
//! layers, each checked against structure the implementation does not use:
//! independent oracles, algebraic bounds, and exact identities.

mod oracles;

use ndarray::{Array2, Array3};
use proptest::prelude::*;
use uwfadapt::data::{
    split_dataset, BoundingBox, DatasetManifest, Domain, LabelData, LabelPayload, ManifestEntry,
    TaskKind,
};
use uwfadapt::eval::{f1_from_pr, tessellation_grade, DetectionMatchSpec, TessellationGrader};
use uwfadapt::imgio::{MaskArray, RgbArray};
use uwfadapt::preprocess::remove_artifacts;
use uwfadapt::pseudo::{filter_samples, PseudoLabel, ThresholdPolicy};

const CLASSES: usize = 4;

fn pseudo_labels() -> impl Strategy<Value = Vec<PseudoLabel>> {
    prop::collection::vec(prop::collection::vec(0.0..1.0f64, CLASSES), 0..30).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, mut q)| {
                let sum: f64 = q.iter().sum();
                if sum == 0.0 {
                    q[0] = 1.0;
                } else {
                    for v in q.iter_mut() {
                        *v /= sum;
                    }
                }
                let confidence = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                PseudoLabel {
                    id: format!("s{i:03}"),
                    q_u: q,
                    confidence,
                }
            })
            .collect()
    })
}

fn ids(labels: &[PseudoLabel]) -> Vec<String> {
    labels.iter().map(|l| l.id.clone()).collect()
}

fn boxes() -> impl Strategy<Value = Vec<BoundingBox>> {
    let one = (0usize..3, 0u32..80, 0u32..80, 5u32..40, 5u32..40, 0u32..=100).prop_map(
        |(class, x, y, w, h, conf)| BoundingBox {
            class,
            x_min: x as f64 / 100.0,
            y_min: y as f64 / 100.0,
            x_max: (x + w) as f64 / 100.0,
            y_max: (y + h) as f64 / 100.0,
            confidence: conf as f64 / 100.0,
        },
    );
    prop::collection::vec(one, 0..=6)
}

fn mask(side: usize) -> impl Strategy<Value = MaskArray> {
    prop::collection::vec(prop::bool::ANY, side * side).prop_map(move |bits| {
        Array2::from_shape_fn((side, side), |(y, x)| u8::from(bits[y * side + x]))
    })
}

fn image(side: usize) -> impl Strategy<Value = RgbArray> {
    prop::collection::vec(0.0..1.0f64, 3 * side * side).prop_map(move |v| {
        Array3::from_shape_vec((3, side, side), v).unwrap()
    })
}

proptest! {
    #[test]
    fn raising_the_threshold_never_adds_samples(
        labels in pseudo_labels(),
        a in 0.0..=1.0f64,
        b in 0.0..=1.0f64,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let loose = ids(&filter_samples(&labels, &ThresholdPolicy::Uniform { tau: lo }).unwrap());
        let strict = ids(&filter_samples(&labels, &ThresholdPolicy::Uniform { tau: hi }).unwrap());
        prop_assert!(strict.len() <= loose.len());
        prop_assert!(strict.iter().all(|id| loose.contains(id)));
    }

    #[test]
    fn equal_per_class_thresholds_match_the_uniform_policy(
        labels in pseudo_labels(),
        tau in 0.0..=1.0f64,
    ) {
        let uniform = filter_samples(&labels, &ThresholdPolicy::Uniform { tau }).unwrap();
        let per_class =
            filter_samples(&labels, &ThresholdPolicy::PerClass { tau: vec![tau; CLASSES] })
                .unwrap();
        prop_assert_eq!(ids(&uniform), ids(&per_class));
    }

    #[test]
    fn lesion_counts_match_the_exhaustive_assignment(pred in boxes(), gt in boxes()) {
        let spec = DetectionMatchSpec::lesion(0.3).unwrap();
        let got = uwfadapt::eval::match_detections(&pred, &gt, &spec);
        let want = oracles::exhaustive_lesion_counts(&pred, &gt, 0.3);
        prop_assert_eq!(got, want);
        prop_assert_eq!(got.tp + got.fp, pred.len() as u64);
        prop_assert_eq!(got.tp + got.fn_, gt.len() as u64);
    }

    #[test]
    fn f1_is_a_symmetric_mean_between_min_and_max(
        p in 0u32..=100,
        r in 0u32..=100,
    ) {
        let (p, r) = (p as f64 / 100.0, r as f64 / 100.0);
        let f1 = f1_from_pr(p, r);
        prop_assert!(f1 >= p.min(r) - 1e-12);
        prop_assert!(f1 <= p.max(r) + 1e-12);
        prop_assert_eq!(f1, f1_from_pr(r, p));
        // scale invariance lets percent inputs yield percent outputs
        prop_assert!((f1_from_pr(p * 100.0, r * 100.0) - f1 * 100.0).abs() < 1e-9);
    }

    #[test]
    fn grading_matches_the_pixel_count_oracle(
        m in mask(11),
        mut fundus in mask(11),
    ) {
        fundus[[0, 0]] = 1;
        let grader = TessellationGrader::default();
        let got = tessellation_grade(&m, &fundus, &grader).unwrap();
        let want = oracles::grade_by_pixel_count(&m, &fundus, grader.cutoffs()).unwrap();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn exact_ratios_fall_into_the_upper_band(positives in 0usize..=100) {
        // 100 fundus pixels, so every cutoff is reachable exactly
        let fundus: MaskArray = Array2::ones((10, 10));
        let m = Array2::from_shape_fn((10, 10), |(y, x)| u8::from(y * 10 + x < positives));
        let grader = TessellationGrader::default();
        let got = tessellation_grade(&m, &fundus, &grader).unwrap();
        let ratio = positives as f64 / 100.0;
        let cutoffs = grader.cutoffs();
        prop_assert_eq!(got, oracles::grade_by_pixel_count(&m, &fundus, cutoffs).unwrap());
        for band in 1..=4usize {
            if (ratio - cutoffs[band]).abs() < 1e-12 {
                prop_assert_eq!(got, band, "ratio at a cutoff belongs to the upper band");
            }
        }
    }

    #[test]
    fn artifact_removal_is_idempotent_and_local(
        img in image(12),
        m in mask(12),
    ) {
        let once = remove_artifacts(&img, &m).unwrap();
        let twice = remove_artifacts(&once, &m).unwrap();
        prop_assert_eq!(&once, &twice);
        for y in 0..12 {
            for x in 0..12 {
                for c in 0..3 {
                    let expected = if m[[y, x]] == 1 { 0.0 } else { img[[c, y, x]] };
                    prop_assert_eq!(once[[c, y, x]], expected);
                }
            }
        }
    }
}

fn class_manifest(dir: &std::path::Path, per_class: &[usize]) -> DatasetManifest {
    let mut m = DatasetManifest::new(dir, 0);
    for (c, &count) in per_class.iter().enumerate() {
        for i in 0..count {
            let id = format!("c{c}_{i:03}");
            let mut dist = vec![0.0; per_class.len().max(2)];
            dist[c] = 1.0;
            let label_ref = m
                .save_label(&id, &LabelPayload::ground_truth(LabelData::ClassDist(dist)))
                .unwrap();
            m.push(ManifestEntry {
                id: id.clone(),
                path: format!("img/{id}.png"),
                domain: Domain::Target,
                task: TaskKind::Classification,
                label_ref: Some(label_ref),
                split: None,
            });
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_ratios_assign_every_sample_within_one_of_quota(
        per_class in prop::collection::vec(3usize..12, 1..4),
        weights in (1u32..10, 1u32..10, 1u32..10),
        seed in 0u64..1000,
    ) {
        let total = (weights.0 + weights.1 + weights.2) as f64;
        let ratios = (
            weights.0 as f64 / total,
            weights.1 as f64 / total,
            weights.2 as f64 / total,
        );
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = class_manifest(dir.path(), &per_class);
        let summary = split_dataset(&mut manifest, ratios, seed).unwrap();

        prop_assert!(manifest.entries.iter().all(|e| e.split.is_some()));
        let n: usize = per_class.iter().sum();
        prop_assert_eq!(summary.train + summary.val + summary.test, n);

        for (c, &count) in per_class.iter().enumerate() {
            let prefix = format!("c{c}_");
            for (split, ratio) in [
                (uwfadapt::data::Split::Train, ratios.0),
                (uwfadapt::data::Split::Val, ratios.1),
                (uwfadapt::data::Split::Test, ratios.2),
            ] {
                let got = manifest
                    .entries
                    .iter()
                    .filter(|e| e.id.starts_with(&prefix) && e.split == Some(split))
                    .count();
                let quota = count as f64 * ratio;
                prop_assert!(
                    (got as f64) >= quota.floor() && (got as f64) <= quota.floor() + 1.0,
                    "stratum {} split {:?}: {} outside [{}, {}]",
                    c, split, got, quota.floor(), quota.floor() + 1.0
                );
            }
        }
    }
}
