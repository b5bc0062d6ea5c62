//! Artifact removal: train a small encoder-decoder segmenter on a few
//! annotated masks, then recycle low-quality target images by blacking out
//! the pixels it flags.

use crate::data::manifest::{DatasetManifest, ManifestEntry};
use crate::data::sample::Domain;
use crate::error::{Error, Result};
use crate::imgio::{self, MaskArray, RgbArray};
use crate::nn::{bce_map, Adadelta, Batch, LayerSpec, Net, SavedNet};
use crate::seeding::rng_for;
use ndarray::{Array2, Array4};
use rand::RngExt;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmenterConfig {
    /// Model input resolution; image sizes must be an integer multiple.
    pub resolution: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Adadelta step size and accumulator decay.
    pub lr: f64,
    pub rho: f64,
    pub seed: u64,
    /// When set, a checkpoint is written after every epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
}

impl SegmenterConfig {
    pub fn desk() -> SegmenterConfig {
        SegmenterConfig {
            resolution: 128,
            epochs: 100,
            batch_size: 4,
            lr: 1.0,
            rho: 0.95,
            seed: 0,
            checkpoint_dir: None,
        }
    }

    /// Full-scale preset: 1024x1024 input, 50 epochs.
    pub fn paper() -> SegmenterConfig {
        SegmenterConfig {
            resolution: 1024,
            epochs: 50,
            batch_size: 4,
            lr: 1.0,
            rho: 0.95,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

/// Full-resolution stem, then a strided encode / upsample decode branch on a
/// skip connection; the skip keeps pixel-accurate localization while the
/// branch adds wider context.
fn segmenter_spec() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv { in_c: 3, out_c: 8, kernel: 3, stride: 1, pad: 1 },
        LayerSpec::LeakyRelu { alpha: 0.1 },
        LayerSpec::Residual {
            inner: vec![
                LayerSpec::Conv { in_c: 8, out_c: 16, kernel: 3, stride: 2, pad: 1 },
                LayerSpec::LeakyRelu { alpha: 0.1 },
                LayerSpec::Conv { in_c: 16, out_c: 16, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::LeakyRelu { alpha: 0.1 },
                LayerSpec::Upsample2x,
                LayerSpec::Conv { in_c: 16, out_c: 8, kernel: 3, stride: 1, pad: 1 },
            ],
        },
        LayerSpec::LeakyRelu { alpha: 0.1 },
        LayerSpec::Conv { in_c: 8, out_c: 1, kernel: 3, stride: 1, pad: 1 },
        LayerSpec::Sigmoid,
    ]
}

pub struct SegmenterModel {
    net: Net,
    pub config: SegmenterConfig,
}

#[derive(Serialize, Deserialize)]
struct SavedSegmenter {
    config: SegmenterConfig,
    net: SavedNet,
}

impl SegmenterModel {
    pub(crate) fn net_mut(&mut self) -> &mut Net {
        &mut self.net
    }

    /// Deep copy via the serialized parameter form.
    pub fn clone_model(&self) -> Result<SegmenterModel> {
        Ok(SegmenterModel {
            net: Net::from_saved(&self.net.to_saved())?,
            config: self.config.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let saved = SavedSegmenter {
            config: self.config.clone(),
            net: self.net.to_saved(),
        };
        std::fs::write(path, serde_json::to_vec(&saved)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SegmenterModel> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let saved: SavedSegmenter = serde_json::from_slice(&bytes)?;
        Ok(SegmenterModel {
            net: Net::from_saved(&saved.net)?,
            config: saved.config,
        })
    }

    /// Per-pixel artifact probability at the image's own resolution.
    pub fn predict_probs(&mut self, image: &RgbArray) -> Result<Array2<f64>> {
        let (_, h, w) = image.dim();
        let factor = downscale_factor(h.min(w), self.config.resolution.min(h.min(w)))?;
        let small = block_mean_downscale(image, factor);
        let (_, sh, sw) = small.dim();
        let mut x = Array4::zeros((1, 3, sh, sw));
        x.index_axis_mut(ndarray::Axis(0), 0).assign(&small);
        let y = self.net.forward(&x, false);
        let probs_small = y.index_axis(ndarray::Axis(0), 0).index_axis(ndarray::Axis(0), 0).to_owned();
        Ok(nearest_upscale(&probs_small, factor))
    }

    pub fn predict_mask(&mut self, image: &RgbArray, threshold: f64) -> Result<MaskArray> {
        let probs = self.predict_probs(image)?;
        Ok(probs.mapv(|p| u8::from(p >= threshold)))
    }
}

pub(crate) fn downscale_factor(image_size: usize, resolution: usize) -> Result<usize> {
    if resolution == 0 || image_size % resolution != 0 {
        return Err(Error::Config(format!(
            "model resolution {resolution} does not divide image size {image_size}"
        )));
    }
    Ok(image_size / resolution)
}

pub(crate) fn block_mean_downscale(image: &RgbArray, factor: usize) -> RgbArray {
    if factor == 1 {
        return image.clone();
    }
    let (c, h, w) = image.dim();
    let (oh, ow) = (h / factor, w / factor);
    let scale = 1.0 / (factor * factor) as f64;
    let mut out = ndarray::Array3::zeros((c, oh, ow));
    for ci in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut sum = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        sum += image[[ci, y * factor + dy, x * factor + dx]];
                    }
                }
                out[[ci, y, x]] = sum * scale;
            }
        }
    }
    out
}

/// Max-pool downscale keeps thin positive structures visible.
pub(crate) fn block_max_downscale_mask(mask: &MaskArray, factor: usize) -> MaskArray {
    if factor == 1 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let (oh, ow) = (h / factor, w / factor);
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let mut v = 0u8;
        for dy in 0..factor {
            for dx in 0..factor {
                v = v.max(mask[[y * factor + dy, x * factor + dx]]);
            }
        }
        v
    })
}

fn nearest_upscale(map: &Array2<f64>, factor: usize) -> Array2<f64> {
    if factor == 1 {
        return map.clone();
    }
    let (h, w) = map.dim();
    Array2::from_shape_fn((h * factor, w * factor), |(y, x)| map[[y / factor, x / factor]])
}

#[derive(Debug, Clone)]
pub struct SegmenterTrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Trains the artifact segmenter with per-parameter adaptive updates
/// (step 1.0, decay 0.95) and pixelwise binary cross entropy.
pub fn train_artifact_segmenter(
    labeled: &[(RgbArray, MaskArray)],
    config: &SegmenterConfig,
) -> Result<(SegmenterModel, SegmenterTrainReport)> {
    if labeled.is_empty() {
        return Err(Error::Invalid("no labeled artifact masks to train on".into()));
    }
    let (_, h, w) = labeled[0].0.dim();
    if h != w {
        return Err(Error::Shape(format!("expected square images, got {h}x{w}")));
    }
    for (img, mask) in labeled {
        if img.dim() != (3, h, w) || mask.dim() != (h, w) {
            return Err(Error::Shape("inconsistent image/mask sizes in training set".into()));
        }
    }
    let factor = downscale_factor(h, self_resolution(config, h))?;
    let res = h / factor;

    let mut rng = rng_for(config.seed, "preprocess/segmenter-init");
    let mut net = Net::new(segmenter_spec(), &mut rng);
    let mut opt = Adadelta::new(config.lr, config.rho);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut erng = rng_for(config.seed, &format!("preprocess/epoch{epoch}"));
        for i in (1..order.len()).rev() {
            let j = erng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let mut x: Batch = Array4::zeros((chunk.len(), 3, res, res));
            let mut t: Batch = Array4::zeros((chunk.len(), 1, res, res));
            for (bi, &si) in chunk.iter().enumerate() {
                let img = block_mean_downscale(&labeled[si].0, factor);
                let mask = block_max_downscale_mask(&labeled[si].1, factor);
                x.index_axis_mut(ndarray::Axis(0), bi).assign(&img);
                for y in 0..res {
                    for xx in 0..res {
                        t[[bi, 0, y, xx]] = mask[[y, xx]] as f64;
                    }
                }
            }
            net.zero_grad();
            let pred = net.forward(&x, true);
            let (loss, grad) = bce_map(&pred, &t, None);
            net.backward(&grad);
            opt.step(&mut net.param_refs());
            epoch_loss += loss;
            batches += 1;
        }
        epoch_losses.push(epoch_loss / batches.max(1) as f64);
        if let Some(dir) = &config.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let model = SegmenterModel {
                net: Net::from_saved(&net.to_saved())?,
                config: config.clone(),
            };
            model.save(&dir.join(format!("seg_epoch{epoch}.json")))?;
        }
    }

    let final_config = SegmenterConfig {
        resolution: res,
        ..config.clone()
    };
    Ok((
        SegmenterModel {
            net,
            config: final_config,
        },
        SegmenterTrainReport { epoch_losses },
    ))
}

/// The model trains at the image resolution when that is smaller than the
/// configured one; paper-scale configs then apply unchanged to desk images.
pub(crate) fn self_resolution(config: &SegmenterConfig, image_size: usize) -> usize {
    config.resolution.min(image_size)
}

/// Blacks out artifact pixels: output = (0,0,0) where mask = 1.
pub fn remove_artifacts(image: &RgbArray, mask: &MaskArray) -> Result<RgbArray> {
    let (_, h, w) = image.dim();
    if mask.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "mask {:?} does not match image {h}x{w}",
            mask.dim()
        )));
    }
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == 1 {
                for c in 0..3 {
                    out[[c, y, x]] = 0.0;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct PreprocessReport {
    /// (sample id, fraction of pixels removed)
    pub rows: Vec<(String, f64)>,
}

impl PreprocessReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut body = String::from("id,artifact_fraction\n");
        for (id, frac) in &self.rows {
            body.push_str(&format!("{id},{frac}\n"));
        }
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }
}

/// Cleans every target-domain image and copies everything else through.
/// The cleaned dataset (including label sidecars) is written under `out_dir`
/// with its own manifest.
pub fn preprocess_dataset(
    manifest: &DatasetManifest,
    model: &mut SegmenterModel,
    binarize_threshold: f64,
    out_dir: &Path,
) -> Result<(DatasetManifest, PreprocessReport)> {
    let mut cleaned = DatasetManifest::new(out_dir, manifest.seed);
    let mut report = PreprocessReport::default();
    for entry in &manifest.entries {
        let sample = manifest.load_sample(entry)?;
        let image = if entry.domain == Domain::Target {
            let mask = model.predict_mask(&sample.image, binarize_threshold)?;
            let fraction =
                mask.iter().filter(|&&v| v == 1).count() as f64 / mask.len() as f64;
            report.rows.push((entry.id.clone(), fraction));
            remove_artifacts(&sample.image, &mask)?
        } else {
            sample.image.clone()
        };
        let path = cleaned.save_image("images", &entry.id, &image)?;
        let label_ref = match &sample.label {
            Some(payload) => Some(cleaned.save_label(&entry.id, payload)?),
            None => None,
        };
        cleaned.push(ManifestEntry {
            id: entry.id.clone(),
            path,
            domain: entry.domain,
            task: entry.task,
            label_ref,
            split: entry.split,
        });
    }
    cleaned.save(&out_dir.join("manifest.csv"))?;
    Ok((cleaned, report))
}

/// Collects (image, artifact mask) pairs for entries that have a mask file
/// named `<masks_dir>/<id>.png`.
pub fn load_artifact_pairs(
    manifest: &DatasetManifest,
    masks_dir: &Path,
) -> Result<Vec<(String, RgbArray, MaskArray)>> {
    let mut pairs = Vec::new();
    for entry in &manifest.entries {
        let mask_path = masks_dir.join(format!("{}.png", entry.id));
        if !mask_path.is_file() {
            continue;
        }
        let image = imgio::load_rgb(&manifest.root().join(&entry.path))?;
        let mask = imgio::load_mask(&mask_path)?;
        pairs.push((entry.id.clone(), image, mask));
    }
    Ok(pairs)
}

/// Intersection over union of two binary masks; 1.0 when both are empty.
pub fn mask_iou(a: &MaskArray, b: &MaskArray) -> f64 {
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        if x == 1 || y == 1 {
            union += 1;
            if x == 1 && y == 1 {
                inter += 1;
            }
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn gradient_image(size: usize) -> RgbArray {
        Array3::from_shape_fn((3, size, size), |(c, y, x)| {
            ((c + 1) * (y * size + x)) as f64 / (3 * size * size) as f64
        })
    }

    #[test]
    fn zero_mask_leaves_image_unchanged() {
        let img = gradient_image(8);
        let out = remove_artifacts(&img, &Array2::zeros((8, 8))).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn full_mask_blacks_everything() {
        let img = gradient_image(8);
        let out = remove_artifacts(&img, &Array2::ones((8, 8))).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_mask_changes_exactly_the_masked_pixels() {
        let img = Array3::from_elem((3, 8, 8), 0.5);
        let mask = Array2::from_shape_fn((8, 8), |(y, _)| u8::from(y < 4));
        let out = remove_artifacts(&img, &mask).unwrap();
        let changed = (0..8)
            .flat_map(|y| (0..8).map(move |x| (y, x)))
            .filter(|&(y, x)| (0..3).any(|c| out[[c, y, x]] != img[[c, y, x]]))
            .count();
        assert_eq!(changed, 32);
    }

    #[test]
    fn remove_artifacts_is_idempotent() {
        let img = gradient_image(8);
        let mask = Array2::from_shape_fn((8, 8), |(y, x)| u8::from((y + x) % 3 == 0));
        let once = remove_artifacts(&img, &mask).unwrap();
        let twice = remove_artifacts(&once, &mask).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let img = gradient_image(8);
        assert!(remove_artifacts(&img, &Array2::zeros((4, 4))).is_err());
    }

    fn corner_square_pairs(n: usize, size: usize) -> Vec<(RgbArray, MaskArray)> {
        // occluder = dark square in a varying corner on a bright background
        (0..n)
            .map(|i| {
                let mut img = Array3::from_elem((3, size, size), 0.8);
                let mut mask = Array2::zeros((size, size));
                let (oy, ox) = [(0, 0), (0, size / 2), (size / 2, 0), (size / 2, size / 2)][i % 4];
                for y in oy..oy + size / 2 {
                    for x in ox..ox + size / 2 {
                        for c in 0..3 {
                            img[[c, y, x]] = 0.05;
                        }
                        mask[[y, x]] = 1;
                    }
                }
                (img, mask)
            })
            .collect()
    }

    #[test]
    fn training_loss_decreases_and_is_recorded_per_epoch() {
        let pairs = corner_square_pairs(8, 16);
        let config = SegmenterConfig {
            resolution: 16,
            epochs: 6,
            batch_size: 4,
            lr: 1.0,
            rho: 0.95,
            seed: 1,
            checkpoint_dir: None,
        };
        let (_, report) = train_artifact_segmenter(&pairs, &config).unwrap();
        assert_eq!(report.epoch_losses.len(), 6);
        assert!(
            report.epoch_losses.last().unwrap() < report.epoch_losses.first().unwrap(),
            "losses {:?}",
            report.epoch_losses
        );
    }

    #[test]
    fn single_epoch_records_one_loss() {
        let pairs = corner_square_pairs(4, 16);
        let config = SegmenterConfig {
            epochs: 1,
            resolution: 16,
            ..SegmenterConfig::desk()
        };
        let (_, report) = train_artifact_segmenter(&pairs, &config).unwrap();
        assert_eq!(report.epoch_losses.len(), 1);
    }

    #[test]
    fn empty_training_set_is_rejected() {
        assert!(train_artifact_segmenter(&[], &SegmenterConfig::desk()).is_err());
    }

    #[test]
    fn checkpoints_are_written_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = corner_square_pairs(4, 16);
        let config = SegmenterConfig {
            resolution: 16,
            epochs: 3,
            batch_size: 4,
            lr: 1.0,
            rho: 0.95,
            seed: 2,
            checkpoint_dir: Some(dir.path().to_path_buf()),
        };
        train_artifact_segmenter(&pairs, &config).unwrap();
        for e in 0..3 {
            assert!(dir.path().join(format!("seg_epoch{e}.json")).is_file());
        }
    }

    #[test]
    fn trained_model_round_trips_through_disk() {
        let pairs = corner_square_pairs(4, 16);
        let config = SegmenterConfig {
            resolution: 16,
            epochs: 2,
            batch_size: 4,
            lr: 1.0,
            rho: 0.95,
            seed: 3,
            checkpoint_dir: None,
        };
        let (mut model, _) = train_artifact_segmenter(&pairs, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.json");
        model.save(&path).unwrap();
        let mut loaded = SegmenterModel::load(&path).unwrap();
        let probe = gradient_image(16);
        assert_eq!(
            model.predict_probs(&probe).unwrap(),
            loaded.predict_probs(&probe).unwrap()
        );
    }

    #[test]
    fn mask_iou_basics() {
        let a = Array2::from_shape_fn((4, 4), |(y, _)| u8::from(y < 2));
        let b = Array2::from_shape_fn((4, 4), |(y, _)| u8::from(y >= 1 && y < 3));
        assert!((mask_iou(&a, &a) - 1.0).abs() < 1e-12);
        assert!((mask_iou(&a, &b) - 4.0 / 12.0).abs() < 1e-12);
        let empty = Array2::zeros((4, 4));
        assert_eq!(mask_iou(&empty, &empty), 1.0);
    }
}
