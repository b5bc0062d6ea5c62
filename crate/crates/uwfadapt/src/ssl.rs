//! Stage IV: joint semi-supervised training that mixes labeled target
//! samples with kept pseudo-labeled generated samples, plus fine-tuning
//! paths for the detection and segmentation tasks.

use crate::data::sample::BoundingBox;
use crate::error::{Error, Result};
use crate::imgio::{MaskArray, RgbArray};
use crate::nn::{
    bce_map, cross_entropy_soft, l2_rowsum_masked, mse_map, probs_matrix, probs_to_batch, row_max,
    Adam, Batch, LayerSpec, Net, SavedNet,
};
use crate::preprocess::{
    block_max_downscale_mask, block_mean_downscale, downscale_factor, self_resolution,
    SegmenterModel,
};
use crate::pseudo::{
    classification_accuracy, classifier_spec, stack_images, InferenceConfig, InferenceModel,
    PseudoMask,
};
use crate::seeding::rng_for;
use ndarray::{Array2, Array4, ArrayView3, Axis};
use rand::RngExt;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Joint-training schedule. The consistency weight and batch size switch
/// together at `switch_epoch`; the learning rate steps down by 10x every
/// `lr_decay_every` epochs down to `lr_floor`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SslConfig {
    pub classes: usize,
    pub epochs: usize,
    pub switch_epoch: usize,
    pub lambda_early: f64,
    pub lambda_late: f64,
    pub batch_early: usize,
    pub batch_late: usize,
    pub tau: f64,
    pub base_lr: f64,
    pub lr_decay_every: usize,
    pub lr_floor: f64,
    pub augment: bool,
    pub seed: u64,
}

impl SslConfig {
    pub fn desk(seed: u64) -> SslConfig {
        SslConfig {
            classes: 5,
            epochs: 16,
            switch_epoch: 8,
            lambda_early: 1.0,
            lambda_late: 5.0,
            batch_early: 8,
            batch_late: 16,
            tau: 0.7,
            base_lr: 1e-3,
            lr_decay_every: 8,
            lr_floor: 1e-5,
            augment: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.lambda_early < 0.0 || self.lambda_late < 0.0 {
            return Err(Error::Config("consistency weights must be >= 0".into()));
        }
        if self.batch_early == 0 || self.batch_late == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0,1]", self.tau)));
        }
        if self.base_lr <= 0.0 || self.lr_floor <= 0.0 || self.lr_decay_every == 0 {
            return Err(Error::Config("learning-rate schedule must be positive".into()));
        }
        Ok(())
    }

    pub fn lambda_at(&self, epoch: usize) -> f64 {
        if epoch < self.switch_epoch {
            self.lambda_early
        } else {
            self.lambda_late
        }
    }

    pub fn batch_at(&self, epoch: usize) -> usize {
        if epoch < self.switch_epoch {
            self.batch_early
        } else {
            self.batch_late
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.lr_decay_every) as i32;
        (self.base_lr * 10f64.powi(-steps)).max(self.lr_floor)
    }
}

/// Mean cross entropy of predicted probability rows against (possibly soft)
/// ground-truth rows, with the log argument clamped at 1e-12.
pub fn supervised_loss(predictions: &Array2<f64>, ground_truth: &Array2<f64>) -> Result<f64> {
    if predictions.dim() != ground_truth.dim() {
        return Err(Error::Shape(format!(
            "predictions {:?} vs ground truth {:?}",
            predictions.dim(),
            ground_truth.dim()
        )));
    }
    Ok(cross_entropy_soft(predictions, ground_truth).0)
}

/// Masked consistency loss `(1/U) sum mask * ||q_u - prediction||^2` with
/// `mask = [max(q_u) >= tau]` and `U` counting the mask-passing rows, so a
/// masked-out sample contributes exactly nothing.
pub fn unsupervised_loss(
    predictions: &Array2<f64>,
    pseudo_labels: &Array2<f64>,
    tau: f64,
) -> Result<f64> {
    if predictions.dim() != pseudo_labels.dim() {
        return Err(Error::Shape(format!(
            "predictions {:?} vs pseudo labels {:?}",
            predictions.dim(),
            pseudo_labels.dim()
        )));
    }
    let mask = confidence_mask(pseudo_labels, tau);
    Ok(l2_rowsum_masked(pseudo_labels, predictions, &mask).0)
}

pub(crate) fn confidence_mask(q: &Array2<f64>, tau: f64) -> Vec<bool> {
    row_max(q).iter().map(|&(_, conf)| conf >= tau).collect()
}

/// One training batch: labeled samples with ground-truth rows, unlabeled
/// samples with pseudo-label rows.
pub struct MixedBatch {
    pub labeled: Vec<(RgbArray, Vec<f64>)>,
    pub unlabeled: Vec<(RgbArray, Vec<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    pub supervised: f64,
    pub unsupervised: f64,
    pub lambda_u: f64,
    pub total: f64,
}

fn rows_matrix(rows: &[(RgbArray, Vec<f64>)], classes: usize) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((rows.len(), classes));
    for (i, (_, row)) in rows.iter().enumerate() {
        if row.len() != classes {
            return Err(Error::Invalid(format!(
                "label row {i} has {} entries, expected {classes}",
                row.len()
            )));
        }
        for (j, &v) in row.iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    Ok(m)
}

/// Evaluates `L = L_s + lambda_u * L_u` on one mixed batch without training.
pub fn combined_loss(
    model: &mut InferenceModel,
    batch: &MixedBatch,
    epoch: usize,
    config: &SslConfig,
) -> Result<LossComponents> {
    config.validate()?;
    let lambda_u = config.lambda_at(epoch);
    let mut supervised = 0.0;
    if !batch.labeled.is_empty() {
        let images: Vec<RgbArray> = batch.labeled.iter().map(|(x, _)| x.clone()).collect();
        let pred = model.predict_probs(&images)?;
        supervised = supervised_loss(&pred, &rows_matrix(&batch.labeled, model.classes)?)?;
    }
    let mut unsupervised = 0.0;
    if !batch.unlabeled.is_empty() {
        let images: Vec<RgbArray> = batch.unlabeled.iter().map(|(x, _)| x.clone()).collect();
        let pred = model.predict_probs(&images)?;
        unsupervised =
            unsupervised_loss(&pred, &rows_matrix(&batch.unlabeled, model.classes)?, config.tau)?;
    }
    Ok(LossComponents {
        supervised,
        unsupervised,
        lambda_u,
        total: supervised + lambda_u * unsupervised,
    })
}

/// Which labels the generated samples carry in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// No generated data at all; plain supervised baseline.
    None,
    /// Ground-truth labels on the generated samples.
    Gt,
    /// Random one-hot labels.
    Random,
    /// Labels from a deliberately under-trained inference model.
    Weak,
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Ablation> {
        match s {
            "none" => Ok(Ablation::None),
            "gt" => Ok(Ablation::Gt),
            "random" => Ok(Ablation::Random),
            "weak" => Ok(Ablation::Weak),
            other => Err(Error::Config(format!(
                "unknown ablation '{other}' (expected none|gt|random|weak)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub lambda_u: f64,
    pub batch_size: usize,
    pub supervised: f64,
    pub unsupervised: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Stage4Report {
    pub epochs: Vec<EpochMetrics>,
}

impl Stage4Report {
    /// `epoch,split,metric,value` rows, one metric per line.
    pub fn to_metric_csv(&self) -> String {
        let mut out = String::from("epoch,split,metric,value\n");
        for e in &self.epochs {
            for (metric, value) in [
                ("supervised_loss", e.supervised),
                ("unsupervised_loss", e.unsupervised),
                ("lambda_u", e.lambda_u),
                ("lr", e.lr),
            ] {
                out.push_str(&format!("{},train,{metric},{value}\n", e.epoch));
            }
            out.push_str(&format!("{},val,accuracy,{}\n", e.epoch, e.val_accuracy));
        }
        out
    }

    pub fn save_metric_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_metric_csv()).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut row = vec![0.0; classes];
    row[label] = 1.0;
    row
}

/// Trains the Stage IV classifier on labeled target samples plus generated
/// samples carrying pseudo-label rows. `init` continues from an existing
/// model (the usual case: the Stage I model); `None` starts fresh. With no
/// generated samples this is the plain supervised baseline path.
pub fn train_stage4_classifier(
    init: Option<&InferenceModel>,
    labeled: &[(RgbArray, usize)],
    val: &[(RgbArray, usize)],
    generated: &[(RgbArray, Vec<f64>)],
    config: &SslConfig,
) -> Result<(InferenceModel, Stage4Report)> {
    config.validate()?;
    if labeled.is_empty() {
        return Err(Error::Invalid("no labeled samples for joint training".into()));
    }
    if let Some(&(_, bad)) = labeled.iter().find(|(_, l)| *l >= config.classes) {
        return Err(Error::Invalid(format!(
            "label {bad} out of range for {} classes",
            config.classes
        )));
    }
    if generated.iter().any(|(_, q)| q.len() != config.classes) {
        return Err(Error::Invalid(format!(
            "pseudo-label rows must have {} entries",
            config.classes
        )));
    }

    let mut net = match init {
        Some(model) => {
            if model.classes != config.classes {
                return Err(Error::Invalid(format!(
                    "initial model has {} classes, config wants {}",
                    model.classes, config.classes
                )));
            }
            model.clone_net()?
        }
        None => {
            let mut rng = rng_for(config.seed, "stage4/init");
            Net::new(classifier_spec(config.classes, false), &mut rng)
        }
    };
    let mut opt = Adam::new(config.base_lr, 0.9, 0.999);
    let mut report = Stage4Report::default();

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let lambda_u = config.lambda_at(epoch);
        let batch = config.batch_at(epoch);
        opt.set_lr(lr);

        let mut erng = rng_for(config.seed, &format!("stage4/epoch{epoch}"));
        let mut lab_order: Vec<usize> = (0..labeled.len()).collect();
        for i in (1..lab_order.len()).rev() {
            let j = erng.random_range(0..=i);
            lab_order.swap(i, j);
        }
        let mut gen_order: Vec<usize> = (0..generated.len()).collect();
        for i in (1..gen_order.len()).rev() {
            let j = erng.random_range(0..=i);
            gen_order.swap(i, j);
        }

        let use_unsup = !generated.is_empty() && lambda_u > 0.0;
        let driving = labeled.len().max(generated.len());
        let steps = driving.div_ceil(batch);
        let mut sup_sum = 0.0;
        let mut unsup_sum = 0.0;
        for step in 0..steps {
            let lab_idx: Vec<usize> = (0..batch)
                .map(|k| lab_order[(step * batch + k) % labeled.len()])
                .collect();
            let lab_images: Vec<RgbArray> = lab_idx
                .iter()
                .map(|&i| augment_image(&labeled[i].0, config.augment, &mut erng))
                .collect();
            let mut targets = Array2::zeros((lab_idx.len(), config.classes));
            for (bi, &i) in lab_idx.iter().enumerate() {
                targets[[bi, labeled[i].1]] = 1.0;
            }

            net.zero_grad();
            let x = stack_images(&lab_images)?;
            let pred = probs_matrix(&net.forward(&x, true));
            let (sup, grad) = cross_entropy_soft(&pred, &targets);
            net.backward(&probs_to_batch(&grad));
            sup_sum += sup;

            if use_unsup {
                let gen_idx: Vec<usize> = (0..batch)
                    .map(|k| gen_order[(step * batch + k) % generated.len()])
                    .collect();
                let gen_images: Vec<RgbArray> = gen_idx
                    .iter()
                    .map(|&i| augment_image(&generated[i].0, config.augment, &mut erng))
                    .collect();
                let mut q = Array2::zeros((gen_idx.len(), config.classes));
                for (bi, &i) in gen_idx.iter().enumerate() {
                    for (j, &v) in generated[i].1.iter().enumerate() {
                        q[[bi, j]] = v;
                    }
                }
                let xu = stack_images(&gen_images)?;
                let pred_u = probs_matrix(&net.forward(&xu, true));
                let mask = confidence_mask(&q, config.tau);
                let (unsup, grad_u) = l2_rowsum_masked(&q, &pred_u, &mask);
                net.backward(&probs_to_batch(&grad_u.mapv(|g| g * lambda_u)));
                unsup_sum += unsup;
            }
            opt.step(&mut net.param_refs());
        }

        let mut model = InferenceModel::from_net(
            crate::data::sample::TaskKind::Classification,
            config.classes,
            inference_config_view(config),
            net,
        );
        let val_accuracy = classification_accuracy(&mut model, val)?;
        net = model.into_net();
        report.epochs.push(EpochMetrics {
            epoch,
            lr,
            lambda_u,
            batch_size: batch,
            supervised: sup_sum / steps.max(1) as f64,
            unsupervised: unsup_sum / steps.max(1) as f64,
            val_accuracy,
        });
    }

    Ok((
        InferenceModel::from_net(
            crate::data::sample::TaskKind::Classification,
            config.classes,
            inference_config_view(config),
            net,
        ),
        report,
    ))
}

/// The classifier-model metadata recorded alongside a Stage IV result.
fn inference_config_view(config: &SslConfig) -> InferenceConfig {
    InferenceConfig {
        classes: config.classes,
        epochs: config.epochs,
        batch_size: config.batch_early,
        lr: config.base_lr,
        augment: config.augment,
        seed: config.seed,
    }
}

fn augment_image(img: &RgbArray, augment: bool, rng: &mut rand_chacha::ChaCha8Rng) -> RgbArray {
    if !augment {
        return img.clone();
    }
    let hflip = rng.random::<f64>() < 0.5;
    let vflip = rng.random::<f64>() < 0.5;
    let turns = rng.random_range(0..4u8);
    crate::gan::transform_image(img, hflip, vflip, turns)
}

// ---------------------------------------------------------------------------
// Detection fine-tuning
// ---------------------------------------------------------------------------

/// Grid-cell detector settings. `confidence_threshold` gates decoded boxes,
/// `nms_iou` deduplicates them, and cells overlapping ground truth above
/// `ignore_threshold` are excluded from the negative objectness loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub input_size: usize,
    pub classes: usize,
    pub nms_iou: f64,
    pub confidence_threshold: f64,
    pub ignore_threshold: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl DetectorConfig {
    pub fn paper() -> DetectorConfig {
        DetectorConfig {
            input_size: 850,
            classes: 2,
            nms_iou: 0.1,
            confidence_threshold: 0.3,
            ignore_threshold: 0.3,
            lr: 1e-5,
            epochs: 10,
            batch_size: 8,
            seed: 0,
        }
    }

    pub fn desk() -> DetectorConfig {
        DetectorConfig {
            input_size: 256,
            ..DetectorConfig::paper()
        }
    }

    /// Sized for the 64x64 phantom images used in tests.
    pub fn phantom(seed: u64) -> DetectorConfig {
        DetectorConfig {
            input_size: 64,
            seed,
            ..DetectorConfig::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size < 16 {
            return Err(Error::Config("detector input must be >= 16".into()));
        }
        if self.classes == 0 {
            return Err(Error::Config("detector needs at least one class".into()));
        }
        for (name, v) in [
            ("nms_iou", self.nms_iou),
            ("confidence_threshold", self.confidence_threshold),
            ("ignore_threshold", self.ignore_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0,1]")));
            }
        }
        Ok(())
    }
}

fn detector_spec(classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv { in_c: 3, out_c: 8, kernel: 3, stride: 2, pad: 1 },
        LayerSpec::LeakyRelu { alpha: 0.1 },
        LayerSpec::Conv { in_c: 8, out_c: 16, kernel: 3, stride: 2, pad: 1 },
        LayerSpec::LeakyRelu { alpha: 0.1 },
        LayerSpec::Conv { in_c: 16, out_c: 16, kernel: 3, stride: 2, pad: 1 },
        LayerSpec::LeakyRelu { alpha: 0.1 },
        LayerSpec::Conv { in_c: 16, out_c: 5 + classes, kernel: 1, stride: 1, pad: 0 },
        LayerSpec::Sigmoid,
    ]
}

/// Per-cell channel layout: objectness, in-cell x/y offsets, width/height as
/// image fractions, then one score channel per class.
pub struct Detector {
    net: Net,
    pub config: DetectorConfig,
}

#[derive(Serialize, Deserialize)]
struct SavedDetector {
    config: DetectorConfig,
    net: SavedNet,
}

impl Detector {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let saved = SavedDetector {
            config: self.config.clone(),
            net: self.net.to_saved(),
        };
        std::fs::write(path, serde_json::to_vec(&saved)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Detector> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let saved: SavedDetector = serde_json::from_slice(&bytes)?;
        Ok(Detector {
            net: Net::from_saved(&saved.net)?,
            config: saved.config,
        })
    }

    pub fn clone_model(&self) -> Result<Detector> {
        Ok(Detector {
            net: Net::from_saved(&self.net.to_saved())?,
            config: self.config.clone(),
        })
    }

    pub fn param_values(&self) -> Vec<f64> {
        self.net.flat_params()
    }

    /// Decoded, NMS-deduplicated boxes for one image.
    pub fn predict(&mut self, image: &RgbArray) -> Result<Vec<BoundingBox>> {
        let x = stack_images(std::slice::from_ref(image))?;
        let out = self.net.forward(&x, false);
        let boxes = decode_detections(
            &out.index_axis(Axis(0), 0),
            self.config.confidence_threshold,
        );
        Ok(nms(boxes, self.config.nms_iou))
    }
}

/// Grid side length after the detector's three stride-2 stages.
pub fn grid_for(input: usize) -> usize {
    let down = |n: usize| (n + 2 - 3) / 2 + 1;
    down(down(down(input)))
}

/// Turns a `(5+C, G, G)` prediction map into boxes. Confidence is
/// objectness times the best class score.
pub fn decode_detections(pred: &ArrayView3<f64>, confidence_threshold: f64) -> Vec<BoundingBox> {
    let (channels, g, _) = pred.dim();
    let classes = channels - 5;
    let mut boxes = Vec::new();
    for gy in 0..g {
        for gx in 0..g {
            let obj = pred[[0, gy, gx]];
            let (mut class, mut best) = (0usize, f64::NEG_INFINITY);
            for c in 0..classes {
                let score = pred[[5 + c, gy, gx]];
                if score > best {
                    class = c;
                    best = score;
                }
            }
            let confidence = obj * best;
            if confidence < confidence_threshold {
                continue;
            }
            let cx = (gx as f64 + pred[[1, gy, gx]]) / g as f64;
            let cy = (gy as f64 + pred[[2, gy, gx]]) / g as f64;
            let w = pred[[3, gy, gx]];
            let h = pred[[4, gy, gx]];
            boxes.push(BoundingBox {
                class,
                x_min: (cx - w / 2.0).clamp(0.0, 1.0),
                y_min: (cy - h / 2.0).clamp(0.0, 1.0),
                x_max: (cx + w / 2.0).clamp(0.0, 1.0),
                y_max: (cy + h / 2.0).clamp(0.0, 1.0),
                confidence,
            });
        }
    }
    boxes
}

/// Greedy per-class non-maximum suppression by descending confidence.
pub fn nms(mut boxes: Vec<BoundingBox>, iou_threshold: f64) -> Vec<BoundingBox> {
    boxes.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<BoundingBox> = Vec::new();
    for b in boxes {
        if kept
            .iter()
            .all(|k| k.class != b.class || k.iou(&b) < iou_threshold)
        {
            kept.push(b);
        }
    }
    kept
}

/// Builds target and count tensors for one batch of ground-truth box lists.
fn detection_targets(
    boxes: &[&[BoundingBox]],
    grid: usize,
    classes: usize,
    ignore_threshold: f64,
) -> (Batch, Batch, Batch) {
    let n = boxes.len();
    let ch = 5 + classes;
    let mut target = Array4::<f64>::zeros((n, ch, grid, grid));
    // objectness counts everywhere by default; box/class only at positives
    let mut count_bce = Array4::<f64>::zeros((n, ch, grid, grid));
    let mut count_mse = Array4::<f64>::zeros((n, ch, grid, grid));
    for bi in 0..n {
        for gy in 0..grid {
            for gx in 0..grid {
                count_bce[[bi, 0, gy, gx]] = 1.0;
            }
        }
        for b in boxes[bi] {
            let cx = (b.x_min + b.x_max) / 2.0;
            let cy = (b.y_min + b.y_max) / 2.0;
            let gx = ((cx * grid as f64) as usize).min(grid - 1);
            let gy = ((cy * grid as f64) as usize).min(grid - 1);
            target[[bi, 0, gy, gx]] = 1.0;
            target[[bi, 1, gy, gx]] = (cx * grid as f64 - gx as f64).clamp(0.0, 1.0);
            target[[bi, 2, gy, gx]] = (cy * grid as f64 - gy as f64).clamp(0.0, 1.0);
            target[[bi, 3, gy, gx]] = (b.x_max - b.x_min).clamp(0.0, 1.0);
            target[[bi, 4, gy, gx]] = (b.y_max - b.y_min).clamp(0.0, 1.0);
            for ci in 1..=4 {
                count_mse[[bi, ci, gy, gx]] = 1.0;
            }
            if b.class < classes {
                target[[bi, 5 + b.class, gy, gx]] = 1.0;
            }
            for c in 0..classes {
                count_bce[[bi, 5 + c, gy, gx]] = 1.0;
            }
        }
        // cells overlapping ground truth are neither positive nor negative
        for gy in 0..grid {
            for gx in 0..grid {
                if target[[bi, 0, gy, gx]] == 1.0 {
                    continue;
                }
                let cell = BoundingBox {
                    class: 0,
                    x_min: gx as f64 / grid as f64,
                    y_min: gy as f64 / grid as f64,
                    x_max: (gx + 1) as f64 / grid as f64,
                    y_max: (gy + 1) as f64 / grid as f64,
                    confidence: 1.0,
                };
                if boxes[bi].iter().any(|b| cell.iou(b) >= ignore_threshold) {
                    count_bce[[bi, 0, gy, gx]] = 0.0;
                }
            }
        }
    }
    (target, count_bce, count_mse)
}

fn detector_step(
    net: &mut Net,
    opt: &mut Adam,
    images: &[RgbArray],
    boxes: &[&[BoundingBox]],
    config: &DetectorConfig,
) -> Result<f64> {
    let x = stack_images(images)?;
    net.zero_grad();
    let pred = net.forward(&x, true);
    let (_, _, g, _) = pred.dim();
    let (target, count_bce, count_mse) =
        detection_targets(boxes, g, config.classes, config.ignore_threshold);
    let (l_bce, g_bce) = bce_map(&pred, &target, Some(&count_bce));
    let (l_mse, g_mse) = mse_map(&pred, &target, Some(&count_mse));
    net.backward(&(g_bce + g_mse));
    opt.step(&mut net.param_refs());
    Ok(l_bce + l_mse)
}

#[derive(Debug, Clone, Default)]
pub struct DetectorTrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Trains a detector from scratch on (image, ground-truth boxes) pairs.
pub fn train_detector(
    samples: &[(RgbArray, Vec<BoundingBox>)],
    config: &DetectorConfig,
) -> Result<(Detector, DetectorTrainReport)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Invalid("no detection samples to train on".into()));
    }
    let mut rng = rng_for(config.seed, "detector/init");
    let mut net = Net::new(detector_spec(config.classes), &mut rng);
    let mut opt = Adam::new(config.lr, 0.9, 0.999);
    let mut report = DetectorTrainReport::default();
    for epoch in 0..config.epochs {
        let mut erng = rng_for(config.seed, &format!("detector/epoch{epoch}"));
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for i in (1..order.len()).rev() {
            let j = erng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let images: Vec<RgbArray> = chunk.iter().map(|&i| samples[i].0.clone()).collect();
            let boxes: Vec<&[BoundingBox]> =
                chunk.iter().map(|&i| samples[i].1.as_slice()).collect();
            loss_sum += detector_step(&mut net, &mut opt, &images, &boxes, config)?;
            batches += 1;
        }
        report.epoch_losses.push(loss_sum / batches.max(1) as f64);
    }
    Ok((Detector { net, config: config.clone() }, report))
}

/// Fine-tunes a detector on extra samples whose boxes were already
/// threshold-filtered. Zero extra samples return the base parameters
/// untouched.
pub fn finetune_detector(
    base: &Detector,
    extra: &[(RgbArray, Vec<BoundingBox>)],
    config: &DetectorConfig,
) -> Result<Detector> {
    config.validate()?;
    let mut tuned = base.clone_model()?;
    tuned.config = config.clone();
    if extra.is_empty() {
        return Ok(tuned);
    }
    let mut opt = Adam::new(config.lr, 0.9, 0.999);
    for epoch in 0..config.epochs {
        let mut erng = rng_for(config.seed, &format!("detector/finetune-epoch{epoch}"));
        let mut order: Vec<usize> = (0..extra.len()).collect();
        for i in (1..order.len()).rev() {
            let j = erng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size.max(1)) {
            let images: Vec<RgbArray> = chunk.iter().map(|&i| extra[i].0.clone()).collect();
            let boxes: Vec<&[BoundingBox]> = chunk.iter().map(|&i| extra[i].1.as_slice()).collect();
            detector_step(&mut tuned.net, &mut opt, &images, &boxes, config)?;
        }
    }
    Ok(tuned)
}

// ---------------------------------------------------------------------------
// Segmentation fine-tuning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegFinetuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SegFinetuneConfig {
    fn default() -> SegFinetuneConfig {
        SegFinetuneConfig {
            lr: 1e-4,
            epochs: 10,
            batch_size: 4,
            seed: 0,
        }
    }
}

/// The training target paired with a real normal sample: all zeros, nothing
/// ignored.
pub fn normal_target(height: usize, width: usize) -> PseudoMask {
    PseudoMask {
        mask: MaskArray::zeros((height, width)),
        ignore: None,
    }
}

/// Fine-tunes a binary segmenter on extra (image, pseudo-mask) pairs.
/// Ignored pixels are excluded from both the loss numerator and denominator;
/// a batch that is entirely ignored contributes a zero gradient.
pub fn finetune_segmenter(
    base: &SegmenterModel,
    extra: &[(RgbArray, PseudoMask)],
    config: &SegFinetuneConfig,
) -> Result<SegmenterModel> {
    let mut tuned = base.clone_model()?;
    if extra.is_empty() {
        return Ok(tuned);
    }
    let (_, h, w) = extra[0].0.dim();
    if h != w {
        return Err(Error::Shape(format!("expected square images, got {h}x{w}")));
    }
    for (img, pm) in extra {
        if img.dim() != (3, h, w) || pm.mask.dim() != (h, w) {
            return Err(Error::Shape("inconsistent fine-tune sample sizes".into()));
        }
        if let Some(ig) = &pm.ignore {
            if ig.dim() != (h, w) {
                return Err(Error::Shape("ignore mask size mismatch".into()));
            }
        }
    }
    let factor = downscale_factor(h, self_resolution(&tuned.config, h))?;
    let res = h / factor;
    let mut opt = Adam::new(config.lr, 0.9, 0.999);
    for epoch in 0..config.epochs {
        let mut erng = rng_for(config.seed, &format!("segmenter/finetune-epoch{epoch}"));
        let mut order: Vec<usize> = (0..extra.len()).collect();
        for i in (1..order.len()).rev() {
            let j = erng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size.max(1)) {
            let mut x: Batch = Array4::zeros((chunk.len(), 3, res, res));
            let mut t: Batch = Array4::zeros((chunk.len(), 1, res, res));
            let mut count: Batch = Array4::ones((chunk.len(), 1, res, res));
            for (bi, &si) in chunk.iter().enumerate() {
                let (img, pm) = &extra[si];
                x.index_axis_mut(Axis(0), bi)
                    .assign(&block_mean_downscale(img, factor));
                let mask = block_max_downscale_mask(&pm.mask, factor);
                for y in 0..res {
                    for xx in 0..res {
                        t[[bi, 0, y, xx]] = mask[[y, xx]] as f64;
                    }
                }
                if let Some(ig) = &pm.ignore {
                    // a coarse pixel is skipped if any contributing pixel is
                    let ig_small = block_max_downscale_mask(ig, factor);
                    for y in 0..res {
                        for xx in 0..res {
                            if ig_small[[y, xx]] == 1 {
                                count[[bi, 0, y, xx]] = 0.0;
                            }
                        }
                    }
                }
            }
            let net = tuned.net_mut();
            net.zero_grad();
            let pred = net.forward(&x, true);
            let (_, grad) = bce_map(&pred, &t, Some(&count));
            net.backward(&grad);
            opt.step(&mut net.param_refs());
        }
    }
    Ok(tuned)
}

/// Keep/reject decision per generated segmentation sample: a sample whose
/// pseudo-mask claims tessellation is rejected when the auxiliary grading
/// classifier confidently calls it normal (grade 0).
pub fn rejection_decisions(
    normal_probs: &[f64],
    mask_has_positive: &[bool],
    rejection_threshold: f64,
) -> Vec<bool> {
    normal_probs
        .iter()
        .zip(mask_has_positive)
        .map(|(&p0, &positive)| !(positive && p0 >= rejection_threshold))
        .collect()
}

/// Applies the auxiliary weak grading classifier to generated samples and
/// returns which ones to keep.
pub fn reject_false_positives(
    aux: &mut InferenceModel,
    samples: &[(RgbArray, PseudoMask)],
    rejection_threshold: f64,
) -> Result<Vec<bool>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let images: Vec<RgbArray> = samples.iter().map(|(img, _)| img.clone()).collect();
    let probs = aux.predict_probs(&images)?;
    let normal: Vec<f64> = probs.column(0).iter().cloned().collect();
    let has_positive: Vec<bool> = samples
        .iter()
        .map(|(_, pm)| pm.mask.iter().any(|&v| v == 1))
        .collect();
    Ok(rejection_decisions(&normal, &has_positive, rejection_threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample::TaskKind;
    use crate::pseudo::train_inference_model;
    use ndarray::Array3;

    #[test]
    fn schedule_switches_exactly_at_the_boundary() {
        let c = SslConfig::desk(0);
        assert_eq!(c.lambda_at(3), 1.0);
        assert_eq!(c.lambda_at(7), 1.0);
        assert_eq!(c.lambda_at(8), 5.0);
        assert_eq!(c.lambda_at(10), 5.0);
        assert_eq!(c.batch_at(7), 8);
        assert_eq!(c.batch_at(8), 16);
    }

    #[test]
    fn lr_steps_down_to_the_floor() {
        let c = SslConfig::desk(0);
        for e in 0..8 {
            assert_eq!(c.lr_at(e), 1e-3);
        }
        assert!((c.lr_at(8) - 1e-4).abs() < 1e-18);
        assert!((c.lr_at(16) - 1e-5).abs() < 1e-19);
        assert!((c.lr_at(24) - 1e-5).abs() < 1e-19);
        assert!((c.lr_at(200) - 1e-5).abs() < 1e-19);
    }

    #[test]
    fn supervised_loss_matches_closed_forms() {
        // perfect one-hot prediction
        let pred = ndarray::array![[1.0, 0.0, 0.0]];
        let t = ndarray::array![[1.0, 0.0, 0.0]];
        assert!(supervised_loss(&pred, &t).unwrap().abs() < 1e-9);
        // uniform over 5 classes
        let pred = Array2::from_elem((1, 5), 0.2);
        let mut t5 = Array2::zeros((1, 5));
        t5[[0, 2]] = 1.0;
        let loss = supervised_loss(&pred, &t5).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-9, "{loss}");
        // two-sample mean
        let pred = ndarray::array![[0.5, 0.5], [0.25, 0.75]];
        let t = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
        let expect = (2f64.ln() + (4f64 / 3.0).ln()) / 2.0;
        assert!((supervised_loss(&pred, &t).unwrap() - expect).abs() < 1e-12);
        // soft target
        let pred = ndarray::array![[0.6, 0.4]];
        let t = ndarray::array![[0.7, 0.3]];
        let expect = -(0.7 * 0.6f64.ln() + 0.3 * 0.4f64.ln());
        assert!((supervised_loss(&pred, &t).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn unsupervised_loss_pinned_values() {
        // fully masked
        let q = ndarray::array![[0.5, 0.5], [0.6, 0.4]];
        let p = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(unsupervised_loss(&p, &q, 0.9).unwrap(), 0.0);
        // exact match
        assert_eq!(unsupervised_loss(&q, &q, 0.0).unwrap(), 0.0);
        // hand value
        let q = ndarray::array![[1.0, 0.0]];
        let p = ndarray::array![[0.0, 1.0]];
        assert_eq!(unsupervised_loss(&p, &q, 0.0).unwrap(), 2.0);
    }

    #[test]
    fn removing_a_masked_sample_changes_nothing() {
        let q = ndarray::array![[0.9, 0.1], [0.55, 0.45], [0.8, 0.2]];
        let p = ndarray::array![[0.7, 0.3], [0.2, 0.8], [0.5, 0.5]];
        let full = unsupervised_loss(&p, &q, 0.7).unwrap();
        // row 1 has max 0.55 < 0.7: drop it
        let q2 = ndarray::array![[0.9, 0.1], [0.8, 0.2]];
        let p2 = ndarray::array![[0.7, 0.3], [0.5, 0.5]];
        let reduced = unsupervised_loss(&p2, &q2, 0.7).unwrap();
        assert_eq!(full.to_bits(), reduced.to_bits());
    }

    #[test]
    fn unsupervised_loss_ignores_sample_order() {
        let q = ndarray::array![[0.9, 0.1], [0.8, 0.2], [0.75, 0.25]];
        let p = ndarray::array![[0.6, 0.4], [0.3, 0.7], [0.9, 0.1]];
        let a = unsupervised_loss(&p, &q, 0.5).unwrap();
        let qr = ndarray::array![[0.75, 0.25], [0.9, 0.1], [0.8, 0.2]];
        let pr = ndarray::array![[0.9, 0.1], [0.6, 0.4], [0.3, 0.7]];
        let b = unsupervised_loss(&pr, &qr, 0.5).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    fn tiny_model(seed: u64) -> InferenceModel {
        let mut rng = rng_for(seed, "ssl-test/model");
        let net = Net::new(classifier_spec(2, false), &mut rng);
        InferenceModel::from_net(
            TaskKind::Classification,
            2,
            InferenceConfig {
                classes: 2,
                epochs: 0,
                batch_size: 4,
                lr: 1e-3,
                augment: false,
                seed,
            },
            net,
        )
    }

    fn noise_image(seed: u64, size: usize) -> RgbArray {
        let mut rng = rng_for(seed, "ssl-test/image");
        Array3::from_shape_fn((3, size, size), |_| rng.random::<f64>())
    }

    #[test]
    fn combined_loss_components_are_consistent() {
        let mut model = tiny_model(1);
        let batch = MixedBatch {
            labeled: vec![
                (noise_image(1, 8), vec![1.0, 0.0]),
                (noise_image(2, 8), vec![0.0, 1.0]),
            ],
            unlabeled: vec![
                (noise_image(3, 8), vec![0.9, 0.1]),
                (noise_image(4, 8), vec![0.6, 0.4]),
            ],
        };
        let config = SslConfig {
            classes: 2,
            tau: 0.7,
            ..SslConfig::desk(0)
        };
        let out = combined_loss(&mut model, &batch, 10, &config).unwrap();
        assert_eq!(out.lambda_u, 5.0);

        // recompute both components standalone
        let lab_images: Vec<RgbArray> = batch.labeled.iter().map(|(x, _)| x.clone()).collect();
        let pred = model.predict_probs(&lab_images).unwrap();
        let sup = supervised_loss(&pred, &rows_matrix(&batch.labeled, 2).unwrap()).unwrap();
        let unl_images: Vec<RgbArray> = batch.unlabeled.iter().map(|(x, _)| x.clone()).collect();
        let pred_u = model.predict_probs(&unl_images).unwrap();
        let unsup =
            unsupervised_loss(&pred_u, &rows_matrix(&batch.unlabeled, 2).unwrap(), 0.7).unwrap();
        assert!((out.supervised - sup).abs() < 1e-6);
        assert!((out.unsupervised - unsup).abs() < 1e-6);
        assert!((out.total - (sup + 5.0 * unsup)).abs() < 1e-6);

        // zero weight reduces to the supervised term alone
        let config0 = SslConfig {
            lambda_early: 0.0,
            lambda_late: 0.0,
            ..config
        };
        let out0 = combined_loss(&mut model, &batch, 10, &config0).unwrap();
        assert_eq!(out0.total, out0.supervised);
    }

    fn bright_dark(n: usize, seed: u64) -> Vec<(RgbArray, usize)> {
        let mut rng = rng_for(seed, "ssl-test/bright-dark");
        (0..n)
            .map(|i| {
                let class = i % 2;
                let base = if class == 0 { 0.8 } else { 0.2 };
                (
                    Array3::from_shape_fn((3, 8, 8), |_| base + rng.random_range(-0.05..0.05)),
                    class,
                )
            })
            .collect()
    }

    fn quick_config(seed: u64) -> SslConfig {
        SslConfig {
            classes: 2,
            epochs: 3,
            switch_epoch: 2,
            lambda_early: 1.0,
            lambda_late: 5.0,
            batch_early: 4,
            batch_late: 8,
            tau: 0.7,
            base_lr: 1e-2,
            lr_decay_every: 2,
            lr_floor: 1e-5,
            augment: false,
            seed,
        }
    }

    #[test]
    fn stage4_rejects_empty_labeled_set() {
        let err = train_stage4_classifier(None, &[], &[], &[], &quick_config(0));
        assert!(err.is_err());
    }

    #[test]
    fn stage4_without_generated_data_is_plain_supervised() {
        let labeled = bright_dark(8, 1);
        let (_, report) =
            train_stage4_classifier(None, &labeled, &labeled, &[], &quick_config(2)).unwrap();
        assert_eq!(report.epochs.len(), 3);
        assert!(report.epochs.iter().all(|e| e.unsupervised == 0.0));
        assert_eq!(report.epochs[0].lambda_u, 1.0);
        assert_eq!(report.epochs[2].lambda_u, 5.0);
        assert_eq!(report.epochs[0].batch_size, 4);
        assert_eq!(report.epochs[2].batch_size, 8);
        assert_eq!(report.epochs[0].lr, 1e-2);
        assert!((report.epochs[2].lr - 1e-3).abs() < 1e-15);
        let csv = report.to_metric_csv();
        assert!(csv.starts_with("epoch,split,metric,value\n"));
        assert!(csv.contains("0,train,supervised_loss,"));
        assert!(csv.contains("2,val,accuracy,"));
    }

    #[test]
    fn stage4_consumes_pseudo_labeled_data_and_continues_from_init() {
        let labeled = bright_dark(8, 3);
        let generated: Vec<(RgbArray, Vec<f64>)> = bright_dark(8, 4)
            .into_iter()
            .map(|(img, class)| (img, one_hot(class, 2)))
            .collect();
        let (base, _) = train_inference_model(
            &labeled,
            &[],
            &InferenceConfig {
                classes: 2,
                epochs: 2,
                batch_size: 4,
                lr: 1e-2,
                augment: false,
                seed: 5,
            },
        )
        .unwrap();
        let (model, report) =
            train_stage4_classifier(Some(&base), &labeled, &labeled, &generated, &quick_config(6))
                .unwrap();
        assert!(report.epochs.iter().any(|e| e.unsupervised > 0.0));
        assert_eq!(model.classes, 2);
        // wrong-width pseudo rows are rejected
        let bad = vec![(noise_image(9, 8), vec![1.0])];
        assert!(
            train_stage4_classifier(Some(&base), &labeled, &[], &bad, &quick_config(6)).is_err()
        );
    }

    #[test]
    fn ablation_names_parse() {
        assert_eq!("none".parse::<Ablation>().unwrap(), Ablation::None);
        assert_eq!("gt".parse::<Ablation>().unwrap(), Ablation::Gt);
        assert_eq!("random".parse::<Ablation>().unwrap(), Ablation::Random);
        assert_eq!("weak".parse::<Ablation>().unwrap(), Ablation::Weak);
        assert!("other".parse::<Ablation>().is_err());
    }

    #[test]
    fn grid_side_matches_three_stride_two_stages() {
        assert_eq!(grid_for(64), 8);
        assert_eq!(grid_for(256), 32);
        assert_eq!(grid_for(850), 107);
    }

    #[test]
    fn decode_reads_back_a_planted_cell() {
        let mut pred = Array4::<f64>::zeros((1, 7, 4, 4));
        pred[[0, 0, 1, 2]] = 0.9; // objectness at cell (y=1, x=2)
        pred[[0, 1, 1, 2]] = 0.5;
        pred[[0, 2, 1, 2]] = 0.5;
        pred[[0, 3, 1, 2]] = 0.2;
        pred[[0, 4, 1, 2]] = 0.1;
        pred[[0, 6, 1, 2]] = 0.8; // class 1
        let boxes = decode_detections(&pred.index_axis(Axis(0), 0), 0.3);
        assert_eq!(boxes.len(), 1);
        let b = &boxes[0];
        assert_eq!(b.class, 1);
        assert!((b.confidence - 0.72).abs() < 1e-12);
        assert!((b.x_min - (0.625 - 0.1)).abs() < 1e-12);
        assert!((b.y_min - (0.375 - 0.05)).abs() < 1e-12);
        // below the confidence threshold nothing comes out
        assert!(decode_detections(&pred.index_axis(Axis(0), 0), 0.8).is_empty());
    }

    #[test]
    fn nms_keeps_the_strongest_of_overlapping_boxes() {
        let mk = |x: f64, conf: f64, class: usize| BoundingBox {
            class,
            x_min: x,
            y_min: 0.1,
            x_max: x + 0.2,
            y_max: 0.3,
            confidence: conf,
        };
        let kept = nms(vec![mk(0.10, 0.6, 0), mk(0.12, 0.9, 0), mk(0.7, 0.5, 0)], 0.1);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].confidence, 0.9);
        // different classes never suppress each other
        let kept = nms(vec![mk(0.10, 0.6, 0), mk(0.12, 0.9, 1)], 0.1);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn zero_extra_samples_leave_detector_parameters_unchanged() {
        let config = DetectorConfig {
            epochs: 3,
            lr: 1e-3,
            ..DetectorConfig::phantom(7)
        };
        let samples = vec![(
            noise_image(10, 64),
            vec![BoundingBox {
                class: 0,
                x_min: 0.4,
                y_min: 0.4,
                x_max: 0.6,
                y_max: 0.6,
                confidence: 1.0,
            }],
        )];
        let (base, report) = train_detector(&samples, &config).unwrap();
        assert_eq!(report.epoch_losses.len(), 3);
        assert!(report.epoch_losses[2] < report.epoch_losses[0]);
        let tuned = finetune_detector(&base, &[], &config).unwrap();
        assert_eq!(base.param_values(), tuned.param_values());
        let moved = finetune_detector(&base, &samples, &config).unwrap();
        assert_ne!(base.param_values(), moved.param_values());
    }

    #[test]
    fn detector_round_trips_through_disk() {
        let config = DetectorConfig {
            epochs: 1,
            ..DetectorConfig::phantom(8)
        };
        let samples = vec![(noise_image(11, 64), Vec::new())];
        let (det, _) = train_detector(&samples, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.json");
        det.save(&path).unwrap();
        let loaded = Detector::load(&path).unwrap();
        assert_eq!(det.param_values(), loaded.param_values());
    }

    fn seg_model(seed: u64) -> SegmenterModel {
        use crate::preprocess::{train_artifact_segmenter, SegmenterConfig};
        let mut rng = rng_for(seed, "ssl-test/seg-data");
        let pairs: Vec<(RgbArray, MaskArray)> = (0..2)
            .map(|_| {
                let img = Array3::from_shape_fn((3, 16, 16), |_| rng.random::<f64>());
                let mask = MaskArray::from_shape_fn((16, 16), |(y, _)| u8::from(y < 4));
                (img, mask)
            })
            .collect();
        let config = SegmenterConfig {
            resolution: 16,
            epochs: 2,
            batch_size: 2,
            lr: 1.0,
            rho: 0.95,
            seed,
            checkpoint_dir: None,
        };
        train_artifact_segmenter(&pairs, &config).unwrap().0
    }

    #[test]
    fn fully_ignored_batches_leave_segmenter_unchanged() {
        let base = seg_model(12);
        let all_ignored = vec![(
            noise_image(13, 16),
            PseudoMask {
                mask: MaskArray::zeros((16, 16)),
                ignore: Some(MaskArray::ones((16, 16))),
            },
        )];
        let config = SegFinetuneConfig {
            epochs: 2,
            ..SegFinetuneConfig::default()
        };
        let tuned = finetune_segmenter(&base, &all_ignored, &config).unwrap();
        let probe = noise_image(14, 16);
        let mut base_m = base.clone_model().unwrap();
        let mut tuned_m = tuned.clone_model().unwrap();
        assert_eq!(
            base_m.predict_probs(&probe).unwrap(),
            tuned_m.predict_probs(&probe).unwrap()
        );
        // empty extra set is also a no-op
        let mut untouched = finetune_segmenter(&base, &[], &config)
            .unwrap()
            .clone_model()
            .unwrap();
        assert_eq!(
            base_m.predict_probs(&probe).unwrap(),
            untouched.predict_probs(&probe).unwrap()
        );
    }

    #[test]
    fn empty_ignore_set_matches_plain_loss_path() {
        // bce_map with an all-ones count equals bce_map with no count
        let pred = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, y, x)| {
            0.1 + 0.05 * (y * 4 + x) as f64
        });
        let target = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, y, x)| f64::from(y == x));
        let ones = Array4::ones((1, 1, 4, 4));
        let (plain, g_plain) = bce_map(&pred, &target, None);
        let (masked, g_masked) = bce_map(&pred, &target, Some(&ones));
        assert_eq!(plain.to_bits(), masked.to_bits());
        assert_eq!(g_plain, g_masked);
    }

    #[test]
    fn training_on_a_real_mask_moves_the_segmenter() {
        let base = seg_model(15);
        let extra = vec![(
            noise_image(16, 16),
            PseudoMask {
                mask: MaskArray::from_shape_fn((16, 16), |(y, _)| u8::from(y >= 12)),
                ignore: None,
            },
        )];
        let config = SegFinetuneConfig {
            epochs: 3,
            lr: 1e-2,
            ..SegFinetuneConfig::default()
        };
        let tuned = finetune_segmenter(&base, &extra, &config).unwrap();
        let probe = &extra[0].0;
        let mut base_m = base.clone_model().unwrap();
        let mut tuned_m = tuned.clone_model().unwrap();
        assert_ne!(
            base_m.predict_probs(probe).unwrap(),
            tuned_m.predict_probs(probe).unwrap()
        );
        assert_eq!(normal_target(16, 16).mask.sum(), 0);
        assert!(normal_target(16, 16).ignore.is_none());
    }

    #[test]
    fn confident_normal_calls_reject_positive_masks_only() {
        let keep = rejection_decisions(
            &[0.95, 0.95, 0.40, 0.95],
            &[true, false, true, true],
            0.9,
        );
        // rejected only when the mask is positive AND the grader is confident
        assert_eq!(keep, vec![false, true, true, false]);
    }
}
