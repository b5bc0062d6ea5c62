//! Stage I and Stage III: the target-task inference model, soft pseudo-label
//! assignment, and confidence-threshold filtering for samples, boxes, and
//! pixels.

use crate::data::sample::{BoundingBox, TaskKind};
use crate::error::{Error, Result};
use crate::imgio::{MaskArray, RgbArray};
use crate::nn::{
    bce_map, cross_entropy_probs, probs_matrix, probs_to_batch, row_max, Adam, Batch, LayerSpec,
    Net, SavedNet,
};
use crate::seeding::rng_for;
use ndarray::{Array2, Array4, Axis};
use rand::RngExt;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Random flips and quarter turns during training.
    pub augment: bool,
    pub seed: u64,
}

impl InferenceConfig {
    pub fn desk(seed: u64) -> InferenceConfig {
        InferenceConfig {
            classes: 5,
            epochs: 100,
            batch_size: 8,
            lr: 1e-3,
            augment: true,
            seed,
        }
    }
}

pub(crate) fn classifier_spec(classes: usize, multilabel: bool) -> Vec<LayerSpec> {
    let mut spec = vec![
        LayerSpec::Conv { in_c: 3, out_c: 8, kernel: 3, stride: 1, pad: 1 },
        LayerSpec::Relu,
        LayerSpec::Conv { in_c: 8, out_c: 8, kernel: 3, stride: 2, pad: 1 },
        LayerSpec::Relu,
        LayerSpec::Conv { in_c: 8, out_c: 16, kernel: 3, stride: 2, pad: 1 },
        LayerSpec::Relu,
        LayerSpec::Conv { in_c: 16, out_c: 16, kernel: 3, stride: 2, pad: 1 },
        LayerSpec::Relu,
        LayerSpec::GlobalAvgPool,
        LayerSpec::Conv { in_c: 16, out_c: classes, kernel: 1, stride: 1, pad: 0 },
    ];
    if multilabel {
        spec.push(LayerSpec::Sigmoid);
    } else {
        spec.push(LayerSpec::SoftmaxChannels);
    }
    spec
}

/// The target-task model h_T: a probability-vector classifier, or a
/// per-class sigmoid variant standing in for detection/segmentation sources.
pub struct InferenceModel {
    pub task: TaskKind,
    pub classes: usize,
    pub config: InferenceConfig,
    net: Net,
}

#[derive(Serialize, Deserialize)]
struct SavedInference {
    task: TaskKind,
    classes: usize,
    config: InferenceConfig,
    net: SavedNet,
}

impl InferenceModel {
    pub(crate) fn from_net(
        task: TaskKind,
        classes: usize,
        config: InferenceConfig,
        net: Net,
    ) -> InferenceModel {
        InferenceModel { task, classes, config, net }
    }

    pub fn net_mut(&mut self) -> &mut Net {
        &mut self.net
    }

    /// Deep copy of the underlying network via its serialized form.
    pub(crate) fn clone_net(&self) -> Result<Net> {
        Net::from_saved(&self.net.to_saved())
    }

    pub(crate) fn into_net(self) -> Net {
        self.net
    }

    /// One probability row per image. Softmax rows for classification,
    /// independent per-class sigmoids otherwise.
    pub fn predict_probs(&mut self, images: &[RgbArray]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((images.len(), self.classes));
        for (start, chunk) in images.chunks(16).enumerate() {
            let batch = stack_images(chunk)?;
            let probs = probs_matrix(&self.net.forward(&batch, false));
            for (i, row) in probs.axis_iter(Axis(0)).enumerate() {
                out.row_mut(start * 16 + i).assign(&row);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let saved = SavedInference {
            task: self.task,
            classes: self.classes,
            config: self.config.clone(),
            net: self.net.to_saved(),
        };
        std::fs::write(path, serde_json::to_vec(&saved)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<InferenceModel> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let saved: SavedInference = serde_json::from_slice(&bytes)?;
        Ok(InferenceModel {
            task: saved.task,
            classes: saved.classes,
            config: saved.config,
            net: Net::from_saved(&saved.net)?,
        })
    }
}

pub(crate) fn stack_images(images: &[RgbArray]) -> Result<Batch> {
    let Some(first) = images.first() else {
        return Err(Error::Invalid("empty image batch".into()));
    };
    let (c, h, w) = first.dim();
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (c, h, w) {
            return Err(Error::Shape(format!(
                "image {i} is {:?}, expected {:?}",
                img.dim(),
                (c, h, w)
            )));
        }
        out.index_axis_mut(Axis(0), i).assign(img);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct InferenceTrainReport {
    pub epoch_losses: Vec<f64>,
    pub val_accuracy: Vec<f64>,
}

/// Trains the classification inference model on labeled target images.
pub fn train_inference_model(
    train: &[(RgbArray, usize)],
    val: &[(RgbArray, usize)],
    config: &InferenceConfig,
) -> Result<(InferenceModel, InferenceTrainReport)> {
    if train.is_empty() {
        return Err(Error::Invalid("no labeled target samples to train on".into()));
    }
    let first_label = train[0].1;
    if train.iter().all(|(_, l)| *l == first_label) {
        return Err(Error::Invalid(
            "training labels contain a single class; cross-entropy has no signal".into(),
        ));
    }
    if let Some(&(_, bad)) = train.iter().find(|(_, l)| *l >= config.classes) {
        return Err(Error::Invalid(format!(
            "label {bad} out of range for {} classes",
            config.classes
        )));
    }

    let mut rng = rng_for(config.seed, "stage1/init");
    let mut net = Net::new(classifier_spec(config.classes, false), &mut rng);
    let mut opt = Adam::new(config.lr, 0.9, 0.999);
    let mut report = InferenceTrainReport::default();

    for epoch in 0..config.epochs {
        // keep the base rate while accuracy climbs, then settle
        if epoch > 0 && epoch == config.epochs * 2 / 3 {
            opt.set_lr(config.lr * 0.1);
        }
        let mut erng = rng_for(config.seed, &format!("stage1/epoch{epoch}"));
        let mut order: Vec<usize> = (0..train.len()).collect();
        for i in (1..order.len()).rev() {
            let j = erng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let images: Vec<RgbArray> = chunk
                .iter()
                .map(|&i| augment_maybe(&train[i].0, config.augment, &mut erng))
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].1).collect();
            let x = stack_images(&images)?;
            net.zero_grad();
            let probs = probs_matrix(&net.forward(&x, true));
            let (loss, grad) = cross_entropy_probs(&probs, &labels);
            net.backward(&probs_to_batch(&grad));
            opt.step(&mut net.param_refs());
            loss_sum += loss;
            batches += 1;
        }
        report.epoch_losses.push(loss_sum / batches.max(1) as f64);

        let mut model = InferenceModel {
            task: TaskKind::Classification,
            classes: config.classes,
            config: config.clone(),
            net,
        };
        report.val_accuracy.push(classification_accuracy(&mut model, val)?);
        net = model.net;
    }

    Ok((
        InferenceModel {
            task: TaskKind::Classification,
            classes: config.classes,
            config: config.clone(),
            net,
        },
        report,
    ))
}

fn augment_maybe(
    img: &RgbArray,
    augment: bool,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> RgbArray {
    if !augment {
        return img.clone();
    }
    let hflip = rng.random::<f64>() < 0.5;
    let vflip = rng.random::<f64>() < 0.5;
    let turns = rng.random_range(0..4u8);
    crate::gan::transform_image(img, hflip, vflip, turns)
}

/// Argmax accuracy of a classifier over labeled samples; 0 on an empty set.
pub fn classification_accuracy(
    model: &mut InferenceModel,
    samples: &[(RgbArray, usize)],
) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let images: Vec<RgbArray> = samples.iter().map(|(img, _)| img.clone()).collect();
    let probs = model.predict_probs(&images)?;
    let hits = row_max(&probs)
        .iter()
        .zip(samples)
        .filter(|((argmax, _), (_, label))| argmax == label)
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Sigmoid-head variant used as the task model for detection and
/// segmentation source experiments; targets are per-class presence vectors.
pub fn train_multilabel_model(
    train: &[(RgbArray, Vec<f64>)],
    task: TaskKind,
    config: &InferenceConfig,
) -> Result<InferenceModel> {
    if train.is_empty() {
        return Err(Error::Invalid("no labeled samples to train on".into()));
    }
    if train.iter().any(|(_, t)| t.len() != config.classes) {
        return Err(Error::Invalid(format!(
            "presence vectors must have {} entries",
            config.classes
        )));
    }
    let mut rng = rng_for(config.seed, "stage1/multilabel-init");
    let mut net = Net::new(classifier_spec(config.classes, true), &mut rng);
    let mut opt = Adam::new(config.lr, 0.9, 0.999);
    for epoch in 0..config.epochs {
        let mut erng = rng_for(config.seed, &format!("stage1/multilabel-epoch{epoch}"));
        let mut order: Vec<usize> = (0..train.len()).collect();
        for i in (1..order.len()).rev() {
            let j = erng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size.max(1)) {
            let images: Vec<RgbArray> = chunk.iter().map(|&i| train[i].0.clone()).collect();
            let x = stack_images(&images)?;
            let mut target = Array4::zeros((chunk.len(), config.classes, 1, 1));
            for (bi, &si) in chunk.iter().enumerate() {
                for (ci, &v) in train[si].1.iter().enumerate() {
                    target[[bi, ci, 0, 0]] = v;
                }
            }
            net.zero_grad();
            let pred = net.forward(&x, true);
            let (_, grad) = bce_map(&pred, &target, None);
            net.backward(&grad);
            opt.step(&mut net.param_refs());
        }
    }
    Ok(InferenceModel {
        task,
        classes: config.classes,
        config: config.clone(),
        net,
    })
}

/// Soft pseudo-label: the model's full output distribution, kept verbatim.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub id: String,
    pub q_u: Vec<f64>,
    pub confidence: f64,
}

/// Labels every generated sample with the frozen model's soft output.
/// Deterministic, and never mutates the inputs.
pub fn assign_pseudo_labels(
    model: &mut InferenceModel,
    samples: &[(String, RgbArray)],
) -> Result<Vec<PseudoLabel>> {
    if model.task != TaskKind::Classification {
        return Err(Error::Invalid(format!(
            "pseudo-label assignment needs a classification model, got {:?}",
            model.task
        )));
    }
    let images: Vec<RgbArray> = samples.iter().map(|(_, img)| img.clone()).collect();
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let probs = model.predict_probs(&images)?;
    Ok(samples
        .iter()
        .zip(probs.axis_iter(Axis(0)))
        .map(|((id, _), row)| {
            let q_u: Vec<f64> = row.iter().cloned().collect();
            let confidence = q_u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            PseudoLabel {
                id: id.clone(),
                q_u,
                confidence,
            }
        })
        .collect())
}

/// Which samples clear the confidence bar. Comparisons are inclusive (>=).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ThresholdPolicy {
    Uniform { tau: f64 },
    PerClass { tau: Vec<f64> },
}

impl ThresholdPolicy {
    /// The one threshold value the source material states.
    pub fn uniform_default() -> ThresholdPolicy {
        ThresholdPolicy::Uniform { tau: 0.7 }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        let all = |ts: &[f64]| ts.iter().all(|t| (0.0..=1.0).contains(t));
        match self {
            ThresholdPolicy::Uniform { tau } => {
                if !(0.0..=1.0).contains(tau) {
                    return Err(Error::Config(format!("threshold {tau} outside [0,1]")));
                }
            }
            ThresholdPolicy::PerClass { tau } => {
                if tau.len() != classes {
                    return Err(Error::Config(format!(
                        "per-class policy has {} thresholds for {classes} classes",
                        tau.len()
                    )));
                }
                if !all(tau) {
                    return Err(Error::Config("per-class thresholds outside [0,1]".into()));
                }
            }
        }
        Ok(())
    }

    pub fn threshold_for(&self, class: usize) -> f64 {
        match self {
            ThresholdPolicy::Uniform { tau } => *tau,
            ThresholdPolicy::PerClass { tau } => tau[class],
        }
    }

    pub fn describe(&self) -> String {
        match self {
            ThresholdPolicy::Uniform { tau } => format!("uniform({tau})"),
            ThresholdPolicy::PerClass { tau } => format!(
                "per_class({})",
                tau.iter()
                    .map(|t| format!("{t:.3}"))
                    .collect::<Vec<_>>()
                    .join(",")
            ),
        }
    }
}

/// Per-class median confidence over a validation pass, one threshold per
/// predicted class; classes never predicted fall back to `default_tau`.
pub fn per_class_median_thresholds(
    confidences_by_class: &[Vec<f64>],
    default_tau: f64,
) -> Vec<f64> {
    confidences_by_class
        .iter()
        .map(|confs| {
            if confs.is_empty() {
                return default_tau;
            }
            let mut sorted = confs.clone();
            sorted.sort_by(f64::total_cmp);
            let mid = sorted.len() / 2;
            if sorted.len() % 2 == 1 {
                sorted[mid]
            } else {
                0.5 * (sorted[mid - 1] + sorted[mid])
            }
        })
        .collect()
}

/// Builds the per-class policy from a frozen model's validation predictions.
pub fn per_class_policy_from_validation(
    model: &mut InferenceModel,
    val_images: &[RgbArray],
    default_tau: f64,
) -> Result<ThresholdPolicy> {
    let mut by_class = vec![Vec::new(); model.classes];
    if !val_images.is_empty() {
        let probs = model.predict_probs(val_images)?;
        for (argmax, conf) in row_max(&probs) {
            by_class[argmax].push(conf);
        }
    }
    Ok(ThresholdPolicy::PerClass {
        tau: per_class_median_thresholds(&by_class, default_tau),
    })
}

/// Keeps labels whose confidence clears the threshold of their argmax class.
pub fn filter_samples(
    labels: &[PseudoLabel],
    policy: &ThresholdPolicy,
) -> Result<Vec<PseudoLabel>> {
    if let Some(first) = labels.first() {
        policy.validate(first.q_u.len())?;
    }
    Ok(labels
        .iter()
        .filter(|l| {
            let argmax = l
                .q_u
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            l.confidence >= policy.threshold_for(argmax)
        })
        .cloned()
        .collect())
}

/// Boxes with confidence >= `tau_box` survive; a sample predicted normal
/// (no disease present) gets no pseudo-boxes at all.
pub fn filter_detection_boxes(
    boxes: &[BoundingBox],
    tau_box: f64,
    predicted_normal: bool,
) -> Vec<BoundingBox> {
    if predicted_normal {
        return Vec::new();
    }
    boxes
        .iter()
        .filter(|b| b.confidence >= tau_box)
        .cloned()
        .collect()
}

/// A pseudo segmentation target: positives, plus pixels excluded from the
/// loss. The all-zero replacement makes every probability map usable.
#[derive(Debug, Clone)]
pub struct PseudoMask {
    pub mask: MaskArray,
    pub ignore: Option<MaskArray>,
}

/// Fraction of positive annotation area below which the whole map is
/// replaced by an all-zero (normal) target.
pub const MIN_POSITIVE_FRACTION: f64 = 0.05;

/// Thresholds a per-pixel probability map into a pseudo-mask. A pixel's
/// confidence is its max-class probability `max(p, 1-p)`; low-confidence
/// pixels go to the ignore set. Maps with under 5% positive area are
/// replaced by all-zero targets without ignores.
pub fn filter_segmentation_pixels(prob_map: &Array2<f64>, tau_pix: f64) -> PseudoMask {
    let (h, w) = prob_map.dim();
    let mut mask = MaskArray::zeros((h, w));
    let mut ignore = MaskArray::zeros((h, w));
    let mut positives = 0usize;
    for y in 0..h {
        for x in 0..w {
            let p = prob_map[[y, x]];
            let confidence = p.max(1.0 - p);
            if confidence < tau_pix {
                ignore[[y, x]] = 1;
            } else if p >= 0.5 {
                mask[[y, x]] = 1;
                positives += 1;
            }
        }
    }
    if (positives as f64) < MIN_POSITIVE_FRACTION * (h * w) as f64 {
        return PseudoMask {
            mask: MaskArray::zeros((h, w)),
            ignore: None,
        };
    }
    let ignore = if ignore.iter().any(|&v| v == 1) {
        Some(ignore)
    } else {
        None
    };
    PseudoMask { mask, ignore }
}

/// One line per sample in the on-disk pseudo-label store.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoRecord {
    pub id: String,
    pub q_u: Vec<f64>,
    pub confidence: f64,
    pub kept: bool,
    pub policy: String,
}

pub fn write_pseudo_store(
    path: &Path,
    labels: &[PseudoLabel],
    policy: &ThresholdPolicy,
) -> Result<()> {
    if let Some(first) = labels.first() {
        policy.validate(first.q_u.len())?;
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let kept_ids: std::collections::HashSet<String> = filter_samples(labels, policy)?
        .into_iter()
        .map(|l| l.id)
        .collect();
    let mut body = String::new();
    for label in labels {
        let record = PseudoRecord {
            id: label.id.clone(),
            q_u: label.q_u.clone(),
            confidence: label.confidence,
            kept: kept_ids.contains(&label.id),
            policy: policy.describe(),
        };
        body.push_str(&serde_json::to_string(&record)?);
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn read_pseudo_store(path: &Path) -> Result<Vec<PseudoRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn label(id: &str, q_u: Vec<f64>) -> PseudoLabel {
        let confidence = q_u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        PseudoLabel {
            id: id.into(),
            q_u,
            confidence,
        }
    }

    #[test]
    fn uniform_filter_is_boundary_inclusive() {
        let labels = vec![
            label("a", vec![0.9, 0.1]),
            label("b", vec![0.69, 0.31]),
            label("c", vec![0.7, 0.3]),
        ];
        let kept = filter_samples(&labels, &ThresholdPolicy::Uniform { tau: 0.7 }).unwrap();
        let ids: Vec<&str> = kept.iter().map(|l| l.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "c"]);
    }

    #[test]
    fn zero_threshold_keeps_everything() {
        let labels = vec![label("a", vec![0.5, 0.5]), label("b", vec![0.2, 0.8])];
        let kept = filter_samples(&labels, &ThresholdPolicy::Uniform { tau: 0.0 }).unwrap();
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn per_class_length_mismatch_is_rejected() {
        let labels = vec![label("a", vec![0.5, 0.3, 0.2])];
        let policy = ThresholdPolicy::PerClass { tau: vec![0.5, 0.5] };
        assert!(filter_samples(&labels, &policy).is_err());
    }

    #[test]
    fn equal_per_class_thresholds_match_uniform() {
        let labels: Vec<PseudoLabel> = (0..20)
            .map(|i| {
                let p = 0.3 + 0.035 * i as f64;
                label(&format!("s{i}"), vec![p, 1.0 - p])
            })
            .collect();
        let uniform = filter_samples(&labels, &ThresholdPolicy::Uniform { tau: 0.55 }).unwrap();
        let per_class =
            filter_samples(&labels, &ThresholdPolicy::PerClass { tau: vec![0.55, 0.55] }).unwrap();
        let a: Vec<&str> = uniform.iter().map(|l| l.id.as_str()).collect();
        let b: Vec<&str> = per_class.iter().map(|l| l.id.as_str()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn raising_tau_never_adds_samples() {
        let labels: Vec<PseudoLabel> = (0..30)
            .map(|i| {
                let p = 0.5 + 0.016 * i as f64;
                label(&format!("s{i}"), vec![p, 1.0 - p])
            })
            .collect();
        let mut prev = usize::MAX;
        for tau in [0.0, 0.3, 0.5, 0.7, 0.9] {
            let kept = filter_samples(&labels, &ThresholdPolicy::Uniform { tau })
                .unwrap()
                .len();
            assert!(kept <= prev, "tau {tau} kept {kept} > {prev}");
            prev = kept;
        }
    }

    #[test]
    fn detection_filter_boundary_and_normal_rule() {
        let boxes = vec![
            BoundingBox { class: 0, x_min: 0.1, y_min: 0.1, x_max: 0.2, y_max: 0.2, confidence: 0.5 },
            BoundingBox { class: 0, x_min: 0.3, y_min: 0.3, x_max: 0.4, y_max: 0.4, confidence: 0.44 },
        ];
        let kept = filter_detection_boxes(&boxes, 0.45, false);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.5);
        assert!(filter_detection_boxes(&[], 0.45, false).is_empty());
        assert!(filter_detection_boxes(&boxes, 0.45, true).is_empty());
    }

    #[test]
    fn confident_positive_map_keeps_everything() {
        let map = Array2::from_elem((8, 8), 0.99);
        let out = filter_segmentation_pixels(&map, 0.5);
        assert!(out.mask.iter().all(|&v| v == 1));
        assert!(out.ignore.is_none());
    }

    #[test]
    fn sparse_positive_map_becomes_all_zero() {
        // 2 of 64 pixels positive (~3%) at high confidence
        let mut map = Array2::from_elem((8, 8), 0.01);
        map[[0, 0]] = 0.99;
        map[[5, 5]] = 0.99;
        let out = filter_segmentation_pixels(&map, 0.5);
        assert!(out.mask.iter().all(|&v| v == 0));
        assert!(out.ignore.is_none());
    }

    #[test]
    fn impossible_pixel_threshold_cascades_to_all_zero() {
        let map = Array2::from_elem((8, 8), 0.99);
        let out = filter_segmentation_pixels(&map, 1.0);
        assert!(out.mask.iter().all(|&v| v == 0));
        assert!(out.ignore.is_none());
    }

    #[test]
    fn uncertain_pixels_land_in_the_ignore_set() {
        let mut map = Array2::from_elem((4, 4), 0.95);
        map[[1, 1]] = 0.55; // confident enough to count as positive? no: 0.55 < 0.8
        map[[2, 2]] = 0.05;
        let out = filter_segmentation_pixels(&map, 0.8);
        let ignore = out.ignore.expect("uncertain pixel should be ignored");
        assert_eq!(ignore[[1, 1]], 1);
        assert_eq!(ignore[[2, 2]], 0);
        assert_eq!(out.mask[[1, 1]], 0);
        assert_eq!(out.mask[[2, 2]], 0);
        assert_eq!(out.mask[[0, 0]], 1);
    }

    #[test]
    fn median_thresholds_and_empty_class_fallback() {
        let by_class = vec![
            vec![0.9, 0.5, 0.7],
            vec![0.4, 0.8],
            vec![],
        ];
        let taus = per_class_median_thresholds(&by_class, 0.7);
        assert_eq!(taus, vec![0.7, 0.6000000000000001, 0.7]);
    }

    #[test]
    fn policy_validation() {
        assert!(ThresholdPolicy::Uniform { tau: 1.2 }.validate(3).is_err());
        assert!(ThresholdPolicy::PerClass { tau: vec![0.5; 3] }.validate(3).is_ok());
        assert!(ThresholdPolicy::PerClass { tau: vec![0.5; 2] }.validate(3).is_err());
        assert!(ThresholdPolicy::PerClass { tau: vec![0.5, 0.5, -0.1] }
            .validate(3)
            .is_err());
    }

    fn bright_dark_set(n: usize, size: usize, seed: u64) -> Vec<(RgbArray, usize)> {
        let mut rng = rng_for(seed, "bright-dark");
        (0..n)
            .map(|i| {
                let class = i % 2;
                let base = if class == 0 { 0.8 } else { 0.2 };
                let img = Array3::from_shape_fn((3, size, size), |_| {
                    base + rng.random_range(-0.05..0.05)
                });
                (img, class)
            })
            .collect()
    }

    #[test]
    fn classifier_learns_a_separable_toy_problem() {
        let train = bright_dark_set(16, 8, 1);
        let val = bright_dark_set(8, 8, 2);
        let config = InferenceConfig {
            classes: 2,
            epochs: 20,
            batch_size: 8,
            lr: 1e-2,
            augment: false,
            seed: 3,
        };
        let (_, report) = train_inference_model(&train, &val, &config).unwrap();
        assert_eq!(report.epoch_losses.len(), 20);
        assert_eq!(report.val_accuracy.len(), 20);
        assert!(
            *report.val_accuracy.last().unwrap() > 0.5,
            "val accuracy {:?}",
            report.val_accuracy.last()
        );
    }

    #[test]
    fn degenerate_training_sets_are_rejected() {
        let config = InferenceConfig::desk(0);
        assert!(train_inference_model(&[], &[], &config).is_err());
        let one_class: Vec<(RgbArray, usize)> = (0..4)
            .map(|_| (Array3::from_elem((3, 8, 8), 0.5), 1usize))
            .collect();
        assert!(train_inference_model(&one_class, &[], &config).is_err());
    }

    #[test]
    fn single_epoch_model_is_accepted() {
        let train = bright_dark_set(8, 8, 4);
        let config = InferenceConfig {
            classes: 2,
            epochs: 1,
            batch_size: 8,
            lr: 1e-3,
            augment: false,
            seed: 5,
        };
        let (_, report) = train_inference_model(&train, &[], &config).unwrap();
        assert_eq!(report.epoch_losses.len(), 1);
    }

    #[test]
    fn pseudo_labels_store_soft_outputs_verbatim() {
        let train = bright_dark_set(16, 8, 6);
        let config = InferenceConfig {
            classes: 2,
            epochs: 10,
            batch_size: 8,
            lr: 1e-2,
            augment: false,
            seed: 7,
        };
        let (mut model, _) = train_inference_model(&train, &[], &config).unwrap();
        let samples: Vec<(String, RgbArray)> = bright_dark_set(4, 8, 8)
            .into_iter()
            .enumerate()
            .map(|(i, (img, _))| (format!("g{i}"), img))
            .collect();
        let before = samples.clone();
        let labels = assign_pseudo_labels(&mut model, &samples).unwrap();
        assert_eq!(labels.len(), 4);
        for ((id, img), label) in before.iter().zip(&labels) {
            assert_eq!(&label.id, id);
            assert!((label.q_u.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let max = label.q_u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(label.confidence, max);
            // inputs untouched
            assert_eq!(img, &samples.iter().find(|(sid, _)| sid == id).unwrap().1);
        }
        let again = assign_pseudo_labels(&mut model, &samples).unwrap();
        for (a, b) in labels.iter().zip(&again) {
            assert_eq!(a.q_u, b.q_u);
        }
    }

    #[test]
    fn multilabel_model_rejects_bad_targets_and_trains() {
        let config = InferenceConfig {
            classes: 3,
            epochs: 2,
            batch_size: 4,
            lr: 1e-3,
            augment: false,
            seed: 9,
        };
        let imgs: Vec<(RgbArray, Vec<f64>)> = (0..4)
            .map(|i| {
                (
                    Array3::from_elem((3, 8, 8), 0.1 * i as f64),
                    vec![1.0, 0.0, (i % 2) as f64],
                )
            })
            .collect();
        let mut model = train_multilabel_model(&imgs, TaskKind::Detection, &config).unwrap();
        let probs = model
            .predict_probs(&[Array3::from_elem((3, 8, 8), 0.3)])
            .unwrap();
        assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
        let bad = vec![(Array3::from_elem((3, 8, 8), 0.1), vec![1.0])];
        assert!(train_multilabel_model(&bad, TaskKind::Detection, &config).is_err());
        let mismatch: Vec<(String, RgbArray)> = vec![("x".into(), Array3::from_elem((3, 8, 8), 0.1))];
        assert!(assign_pseudo_labels(&mut model, &mismatch).is_err());
    }

    #[test]
    fn pseudo_store_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pseudo.jsonl");
        let labels = vec![
            label("a", vec![0.9, 0.1]),
            label("b", vec![0.55, 0.45]),
        ];
        let policy = ThresholdPolicy::Uniform { tau: 0.7 };
        write_pseudo_store(&path, &labels, &policy).unwrap();
        let records = read_pseudo_store(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert!(records[0].kept);
        assert!(!records[1].kept);
        assert_eq!(records[0].policy, "uniform(0.7)");
        assert_eq!(records[1].q_u, vec![0.55, 0.45]);
    }

    #[test]
    fn uniform_distribution_confidence_is_one_over_c() {
        let l = label("u", vec![0.2; 5]);
        assert!((l.confidence - 0.2).abs() < 1e-12);
    }

    #[test]
    fn model_save_load_round_trip() {
        let train = bright_dark_set(8, 8, 10);
        let config = InferenceConfig {
            classes: 2,
            epochs: 2,
            batch_size: 4,
            lr: 1e-3,
            augment: false,
            seed: 11,
        };
        let (mut model, _) = train_inference_model(&train, &[], &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h_t.json");
        model.save(&path).unwrap();
        let mut loaded = InferenceModel::load(&path).unwrap();
        let probe = vec![Array3::from_elem((3, 8, 8), 0.42)];
        assert_eq!(
            model.predict_probs(&probe).unwrap(),
            loaded.predict_probs(&probe).unwrap()
        );
        assert_eq!(loaded.task, TaskKind::Classification);
    }
}
