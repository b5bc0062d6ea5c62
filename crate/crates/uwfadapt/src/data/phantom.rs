//! Synthetic two-style retina phantom. Source style imitates a narrow-field
//! camera (bright background, wide warm disk); target style imitates a
//! wide-field camera (dark background, smaller vignetted disk, occasional
//! eyelash-like occluder arcs recorded as ground-truth artifact masks).
//!
//! Classes are encoded by lesion count bands, detection boxes by individual
//! lesions, segmentation masks by a tessellation texture of known density, so
//! every label is exact by construction.

use crate::data::manifest::{DatasetManifest, ManifestEntry};
use crate::data::sample::{BoundingBox, Domain, LabelData, LabelPayload, TaskKind};
use crate::error::{Error, Result};
use crate::imgio::{self, MaskArray, RgbArray};
use crate::seeding::rng_for;
use ndarray::{Array2, Array3};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StyleParams {
    pub background: [f64; 3],
    pub disk_color: [f64; 3],
    /// Disk radius as a fraction of half the image size.
    pub disk_radius: f64,
    /// Vignette strength range sampled per image; (0, 0) disables it.
    pub vignette: (f64, f64),
    /// Per-image whole-frame brightness jitter range.
    pub brightness: (f64, f64),
    pub vessel_color: [f64; 3],
    pub vessel_count: usize,
    /// Probability that an image receives occluder arcs.
    pub occluder_prob: f64,
}

impl StyleParams {
    pub fn source_default() -> StyleParams {
        StyleParams {
            background: [0.92, 0.92, 0.90],
            disk_color: [0.76, 0.55, 0.34],
            disk_radius: 0.94,
            vignette: (0.0, 0.0),
            brightness: (0.92, 1.08),
            vessel_color: [0.52, 0.22, 0.18],
            vessel_count: 5,
            occluder_prob: 0.0,
        }
    }

    pub fn target_default() -> StyleParams {
        StyleParams {
            background: [0.02, 0.02, 0.03],
            disk_color: [0.46, 0.30, 0.20],
            disk_radius: 0.74,
            vignette: (0.35, 0.55),
            brightness: (0.90, 1.10),
            vessel_color: [0.28, 0.12, 0.10],
            vessel_count: 5,
            occluder_prob: 0.65,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub classes: usize,
    /// Mean lesion count per severity class; rendered counts jitter by ±1
    /// (never below zero, and class means of zero stay exactly zero).
    pub lesion_counts: Vec<usize>,
    pub cls_source_per_class: usize,
    pub cls_target_per_class: usize,
    pub det_source: usize,
    pub det_target: usize,
    /// Poisson-like mean lesion count for detection samples.
    pub det_lesion_rate: f64,
    pub seg_source_per_grade: usize,
    pub seg_target_per_grade: usize,
    /// Tessellated-area density per grade, 5 grades.
    pub tessellation_density: Vec<f64>,
    pub source_style: StyleParams,
    pub target_style: StyleParams,
    pub seed: u64,
}

impl PhantomSpec {
    /// Desk-scale preset: 5 classes at 64x64, ~1000 source and ~200 labeled
    /// target classification images.
    pub fn desk(seed: u64) -> PhantomSpec {
        PhantomSpec {
            image_size: 64,
            classes: 5,
            lesion_counts: vec![0, 3, 6, 10, 14],
            cls_source_per_class: 200,
            cls_target_per_class: 40,
            det_source: 40,
            det_target: 40,
            det_lesion_rate: 2.2,
            seg_source_per_grade: 8,
            seg_target_per_grade: 8,
            tessellation_density: vec![0.02, 0.12, 0.30, 0.50, 0.70],
            source_style: StyleParams::source_default(),
            target_style: StyleParams::target_default(),
            seed,
        }
    }

    /// Small preset for fast tests.
    pub fn tiny(seed: u64) -> PhantomSpec {
        PhantomSpec {
            image_size: 32,
            classes: 3,
            lesion_counts: vec![0, 3, 7],
            cls_source_per_class: 6,
            cls_target_per_class: 6,
            det_source: 6,
            det_target: 6,
            det_lesion_rate: 1.5,
            seg_source_per_grade: 2,
            seg_target_per_grade: 2,
            tessellation_density: vec![0.02, 0.12, 0.30, 0.50, 0.70],
            source_style: StyleParams::source_default(),
            target_style: StyleParams::target_default(),
            seed,
        }
    }

    pub fn total_samples(&self) -> usize {
        self.classes * (self.cls_source_per_class + self.cls_target_per_class)
            + self.det_source
            + self.det_target
            + 5 * (self.seg_source_per_grade + self.seg_target_per_grade)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config("phantom image size must be >= 16".into()));
        }
        if self.classes == 0 || self.lesion_counts.len() != self.classes {
            return Err(Error::Config(format!(
                "lesionCounts has {} entries for {} classes",
                self.lesion_counts.len(),
                self.classes
            )));
        }
        if self.tessellation_density.len() != 5 {
            return Err(Error::Config(
                "tessellationDensity must list 5 grades".into(),
            ));
        }
        if self
            .tessellation_density
            .iter()
            .any(|&d| !(0.0..=1.0).contains(&d))
        {
            return Err(Error::Config("tessellation densities must be in [0,1]".into()));
        }
        if self.total_samples() == 0 {
            return Err(Error::Config("phantom spec requests zero samples".into()));
        }
        Ok(())
    }
}

const LESION_RADIUS: f64 = 1.6;
const LESION_COLORS: [[f64; 3]; 2] = [[0.95, 0.88, 0.35], [0.30, 0.05, 0.08]];
const TESS_COLOR: [f64; 3] = [0.85, 0.45, 0.25];
// kept slightly above the target background so occluders stay visible (and
// learnable) even where they extend past the fundus rim
const OCCLUDER_COLOR: [f64; 3] = [0.07, 0.06, 0.09];

/// One rendered phantom image with everything known by construction.
pub struct RenderedPhantom {
    pub image: RgbArray,
    pub fundus: MaskArray,
    pub artifact: MaskArray,
    pub boxes: Vec<BoundingBox>,
    pub tessellation: MaskArray,
}

enum Content {
    /// Lesion class per lesion to draw.
    Lesions(Vec<usize>),
    /// Tessellation density to draw.
    Tessellation(f64),
}

fn render(style: &StyleParams, size: usize, content: &Content, rng: &mut ChaCha8Rng) -> RenderedPhantom {
    let half = size as f64 / 2.0;
    let center = half - 0.5;
    let radius = style.disk_radius * half;
    let brightness = rng.random_range(style.brightness.0..=style.brightness.1);
    let vignette = if style.vignette.1 > 0.0 {
        rng.random_range(style.vignette.0..=style.vignette.1)
    } else {
        0.0
    };

    let mut image = Array3::<f64>::zeros((3, size, size));
    let mut fundus = Array2::<u8>::zeros((size, size));
    let mut artifact = Array2::<u8>::zeros((size, size));
    let mut tessellation = Array2::<u8>::zeros((size, size));

    // radial shade factor applied to everything drawn inside the disk
    let shade = |y: f64, x: f64| -> f64 {
        let r = ((y - center).powi(2) + (x - center).powi(2)).sqrt();
        1.0 - vignette * (r / radius).powi(2)
    };

    for y in 0..size {
        for x in 0..size {
            let r = ((y as f64 - center).powi(2) + (x as f64 - center).powi(2)).sqrt();
            let noise = rng.random_range(-0.006..0.006);
            let base = if r <= radius {
                fundus[[y, x]] = 1;
                let s = shade(y as f64, x as f64);
                [
                    style.disk_color[0] * s,
                    style.disk_color[1] * s,
                    style.disk_color[2] * s,
                ]
            } else {
                style.background
            };
            for c in 0..3 {
                image[[c, y, x]] = (base[c] * brightness + noise).clamp(0.0, 1.0);
            }
        }
    }

    // vessels: dark radial strokes
    for _ in 0..style.vessel_count {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let reach = rng.random_range(0.55..0.95) * radius;
        let mut t = rng.random_range(0.05..0.15) * radius;
        while t < reach {
            let y = center + t * angle.sin();
            let x = center + t * angle.cos();
            let (yi, xi) = (y.round() as isize, x.round() as isize);
            if yi >= 0 && xi >= 0 && (yi as usize) < size && (xi as usize) < size {
                let s = shade(y, x) * brightness;
                for c in 0..3 {
                    image[[c, yi as usize, xi as usize]] =
                        (style.vessel_color[c] * s).clamp(0.0, 1.0);
                }
            }
            t += 0.5;
        }
    }

    let mut boxes = Vec::new();
    match content {
        Content::Lesions(classes) => {
            let mut placed: Vec<(f64, f64)> = Vec::new();
            for &class in classes {
                let Some((cy, cx)) = place_lesion(center, radius, &placed, rng) else {
                    continue;
                };
                placed.push((cy, cx));
                let s = shade(cy, cx) * brightness;
                let color = LESION_COLORS[class.min(LESION_COLORS.len() - 1)];
                paint_disc(&mut image, cy, cx, LESION_RADIUS, [
                    (color[0] * s).clamp(0.0, 1.0),
                    (color[1] * s).clamp(0.0, 1.0),
                    (color[2] * s).clamp(0.0, 1.0),
                ]);
                let pad = LESION_RADIUS + 1.0;
                boxes.push(BoundingBox {
                    class,
                    x_min: ((cx - pad) / size as f64).clamp(0.0, 1.0),
                    y_min: ((cy - pad) / size as f64).clamp(0.0, 1.0),
                    x_max: ((cx + pad) / size as f64).clamp(0.0, 1.0),
                    y_max: ((cy + pad) / size as f64).clamp(0.0, 1.0),
                    confidence: 1.0,
                });
            }
        }
        Content::Tessellation(density) => {
            draw_tessellation(
                &mut image,
                &mut tessellation,
                &fundus,
                *density,
                center,
                radius,
                brightness,
                vignette,
                rng,
            );
        }
    }

    if style.occluder_prob > 0.0 && rng.random::<f64>() < style.occluder_prob {
        let arcs = rng.random_range(1..=3);
        for _ in 0..arcs {
            let a0 = rng.random_range(0.0..std::f64::consts::TAU);
            let span = rng.random_range(0.5..1.4);
            let r0 = rng.random_range(0.70..0.85) * radius;
            let width = rng.random_range(2.0..4.5);
            let mut a = a0;
            while a < a0 + span {
                let mut w = 0.0;
                while w < width {
                    let y = center + (r0 + w) * a.sin();
                    let x = center + (r0 + w) * a.cos();
                    let (yi, xi) = (y.round() as isize, x.round() as isize);
                    if yi >= 0 && xi >= 0 && (yi as usize) < size && (xi as usize) < size {
                        for c in 0..3 {
                            image[[c, yi as usize, xi as usize]] = OCCLUDER_COLOR[c];
                        }
                        artifact[[yi as usize, xi as usize]] = 1;
                    }
                    w += 0.5;
                }
                a += 0.5 / (r0 + width);
            }
        }
    }

    RenderedPhantom {
        image,
        fundus,
        artifact,
        boxes,
        tessellation,
    }
}

fn place_lesion(
    center: f64,
    radius: f64,
    placed: &[(f64, f64)],
    rng: &mut ChaCha8Rng,
) -> Option<(f64, f64)> {
    let min_sep = 2.2 * LESION_RADIUS;
    for _ in 0..60 {
        let ang = rng.random_range(0.0..std::f64::consts::TAU);
        let rad = radius * 0.72 * rng.random::<f64>().sqrt();
        let (cy, cx) = (center + rad * ang.sin(), center + rad * ang.cos());
        if placed
            .iter()
            .all(|&(py, px)| ((py - cy).powi(2) + (px - cx).powi(2)).sqrt() >= min_sep)
        {
            return Some((cy, cx));
        }
    }
    None
}

fn paint_disc(image: &mut RgbArray, cy: f64, cx: f64, radius: f64, color: [f64; 3]) {
    let (_, h, w) = image.dim();
    let y0 = ((cy - radius).floor().max(0.0)) as usize;
    let y1 = ((cy + radius).ceil() as usize).min(h - 1);
    let x0 = ((cx - radius).floor().max(0.0)) as usize;
    let x1 = ((cx + radius).ceil() as usize).min(w - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt() <= radius {
                for c in 0..3 {
                    image[[c, y, x]] = color[c];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn draw_tessellation(
    image: &mut RgbArray,
    mask: &mut MaskArray,
    fundus: &MaskArray,
    density: f64,
    center: f64,
    radius: f64,
    brightness: f64,
    vignette: f64,
    rng: &mut ChaCha8Rng,
) {
    let size = mask.dim().0;
    let fundus_area: usize = fundus.iter().map(|&v| v as usize).sum();
    let target_px = (density * fundus_area as f64).round() as usize;
    if target_px == 0 {
        return;
    }
    // 2x2 blocks fully inside the fundus, visited in shuffled order
    let mut blocks = Vec::new();
    for by in (0..size.saturating_sub(1)).step_by(2) {
        for bx in (0..size.saturating_sub(1)).step_by(2) {
            if (0..2).all(|dy| (0..2).all(|dx| fundus[[by + dy, bx + dx]] == 1)) {
                blocks.push((by, bx));
            }
        }
    }
    for i in (1..blocks.len()).rev() {
        let j = rng.random_range(0..=i);
        blocks.swap(i, j);
    }
    let mut painted = 0usize;
    'outer: for (by, bx) in blocks {
        for dy in 0..2 {
            for dx in 0..2 {
                if painted >= target_px {
                    break 'outer;
                }
                let (y, x) = (by + dy, bx + dx);
                let r = ((y as f64 - center).powi(2) + (x as f64 - center).powi(2)).sqrt();
                let s = (1.0 - vignette * (r / radius).powi(2)) * brightness;
                for c in 0..3 {
                    image[[c, y, x]] = (TESS_COLOR[c] * s).clamp(0.0, 1.0);
                }
                mask[[y, x]] = 1;
                painted += 1;
            }
        }
    }
}

/// Renders one sample deterministically from (spec, id). Exposed so tests can
/// regenerate any sample without walking the whole dataset.
pub fn render_by_id(spec: &PhantomSpec, id: &str) -> Result<RenderedPhantom> {
    let plan = plan_for_id(spec, id)
        .ok_or_else(|| Error::sample(id, "id does not belong to this phantom spec"))?;
    let mut rng = rng_for(spec.seed, &format!("phantom/{id}"));
    Ok(render(plan.style(spec), spec.image_size, &plan.content(spec, &mut rng), &mut rng))
}

struct SamplePlan {
    domain: Domain,
    task: TaskKind,
    class: Option<usize>,
    grade: Option<usize>,
}

impl SamplePlan {
    fn style<'a>(&self, spec: &'a PhantomSpec) -> &'a StyleParams {
        match self.domain {
            Domain::Source => &spec.source_style,
            _ => &spec.target_style,
        }
    }

    fn content(&self, spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Content {
        match self.task {
            TaskKind::Classification => {
                let base = spec.lesion_counts[self.class.unwrap()];
                let count = if base == 0 {
                    0
                } else {
                    (base as i64 + rng.random_range(-1..=1)).max(0) as usize
                };
                Content::Lesions(vec![0; count])
            }
            TaskKind::Detection => {
                let count = poisson(spec.det_lesion_rate, rng).min(6);
                let classes = (0..count)
                    .map(|_| usize::from(rng.random::<f64>() < 0.5))
                    .collect();
                Content::Lesions(classes)
            }
            TaskKind::Segmentation => {
                Content::Tessellation(spec.tessellation_density[self.grade.unwrap()])
            }
        }
    }
}

fn poisson(rate: f64, rng: &mut ChaCha8Rng) -> usize {
    if rate <= 0.0 {
        return 0;
    }
    let limit = (-rate).exp();
    let mut k = 0usize;
    let mut p = 1.0;
    loop {
        p *= rng.random::<f64>();
        if p <= limit {
            return k;
        }
        k += 1;
    }
}

fn plan_for_id(spec: &PhantomSpec, id: &str) -> Option<SamplePlan> {
    let parse_idx = |s: &str| s.parse::<usize>().ok();
    let parts: Vec<&str> = id.split('_').collect();
    match parts.as_slice() {
        ["cls", dom, c, i] => {
            let class = parse_idx(c.strip_prefix('c')?)?;
            let idx = parse_idx(i)?;
            let (domain, per) = match *dom {
                "src" => (Domain::Source, spec.cls_source_per_class),
                "tgt" => (Domain::Target, spec.cls_target_per_class),
                _ => return None,
            };
            (class < spec.classes && idx < per).then_some(SamplePlan {
                domain,
                task: TaskKind::Classification,
                class: Some(class),
                grade: None,
            })
        }
        ["det", dom, i] => {
            let idx = parse_idx(i)?;
            let (domain, per) = match *dom {
                "src" => (Domain::Source, spec.det_source),
                "tgt" => (Domain::Target, spec.det_target),
                _ => return None,
            };
            (idx < per).then_some(SamplePlan {
                domain,
                task: TaskKind::Detection,
                class: None,
                grade: None,
            })
        }
        ["seg", dom, g, i] => {
            let grade = parse_idx(g.strip_prefix('g')?)?;
            let idx = parse_idx(i)?;
            let (domain, per) = match *dom {
                "src" => (Domain::Source, spec.seg_source_per_grade),
                "tgt" => (Domain::Target, spec.seg_target_per_grade),
                _ => return None,
            };
            (grade < 5 && idx < per).then_some(SamplePlan {
                domain,
                task: TaskKind::Segmentation,
                class: None,
                grade: Some(grade),
            })
        }
        _ => None,
    }
}

fn all_ids(spec: &PhantomSpec) -> Vec<String> {
    let mut ids = Vec::with_capacity(spec.total_samples());
    for c in 0..spec.classes {
        for i in 0..spec.cls_source_per_class {
            ids.push(format!("cls_src_c{c}_{i:03}"));
        }
        for i in 0..spec.cls_target_per_class {
            ids.push(format!("cls_tgt_c{c}_{i:03}"));
        }
    }
    for i in 0..spec.det_source {
        ids.push(format!("det_src_{i:03}"));
    }
    for i in 0..spec.det_target {
        ids.push(format!("det_tgt_{i:03}"));
    }
    for g in 0..5 {
        for i in 0..spec.seg_source_per_grade {
            ids.push(format!("seg_src_g{g}_{i:03}"));
        }
        for i in 0..spec.seg_target_per_grade {
            ids.push(format!("seg_tgt_g{g}_{i:03}"));
        }
    }
    ids
}

/// Renders the full phantom dataset under `out_dir` and returns its manifest
/// (also saved as `out_dir/manifest.csv`). Target-style images additionally
/// get a ground-truth artifact mask under `artifacts/` (all-zero when the
/// image drew no occluders).
pub fn synthesize_phantom(spec: &PhantomSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut manifest = DatasetManifest::new(out_dir, spec.seed);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    for id in all_ids(spec) {
        let plan = plan_for_id(spec, &id).expect("generated id must parse");
        let rendered = render_by_id(spec, &id)?;
        let path = manifest.save_image("images", &id, &rendered.image)?;
        let label = match plan.task {
            TaskKind::Classification => {
                let mut dist = vec![0.0; spec.classes];
                dist[plan.class.unwrap()] = 1.0;
                LabelPayload::ground_truth(LabelData::ClassDist(dist))
            }
            TaskKind::Detection => LabelPayload::ground_truth(LabelData::Boxes(rendered.boxes.clone())),
            TaskKind::Segmentation => LabelPayload::ground_truth(LabelData::Mask {
                mask: rendered.tessellation.clone(),
                ignore: None,
            }),
        };
        let label_ref = manifest.save_label(&id, &label)?;
        if plan.domain == Domain::Target {
            let art_rel = format!("artifacts/{id}.png");
            let full = out_dir.join(&art_rel);
            std::fs::create_dir_all(full.parent().unwrap())
                .map_err(|e| Error::io(&full, e))?;
            imgio::save_mask(&rendered.artifact, &full)?;
        }
        manifest.push(ManifestEntry {
            id,
            path,
            domain: plan.domain,
            task: plan.task,
            label_ref: Some(label_ref),
            split: None,
        });
    }

    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic_for_fixed_spec_and_seed() {
        let spec = PhantomSpec::tiny(77);
        let a = render_by_id(&spec, "cls_tgt_c1_002").unwrap();
        let b = render_by_id(&spec, "cls_tgt_c1_002").unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.artifact, b.artifact);
        let other_seed = PhantomSpec::tiny(78);
        let c = render_by_id(&other_seed, "cls_tgt_c1_002").unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn zero_sample_spec_is_rejected() {
        let mut spec = PhantomSpec::tiny(0);
        spec.cls_source_per_class = 0;
        spec.cls_target_per_class = 0;
        spec.det_source = 0;
        spec.det_target = 0;
        spec.seg_source_per_grade = 0;
        spec.seg_target_per_grade = 0;
        let dir = tempfile::tempdir().unwrap();
        assert!(synthesize_phantom(&spec, dir.path()).is_err());
    }

    #[test]
    fn zero_lesion_rate_yields_no_boxes() {
        let mut spec = PhantomSpec::tiny(3);
        spec.det_lesion_rate = 0.0;
        for i in 0..spec.det_target {
            let r = render_by_id(&spec, &format!("det_tgt_{i:03}")).unwrap();
            assert!(r.boxes.is_empty());
        }
    }

    #[test]
    fn normal_class_renders_without_lesions() {
        let spec = PhantomSpec::tiny(4);
        assert_eq!(spec.lesion_counts[0], 0);
        let r = render_by_id(&spec, "cls_tgt_c0_000").unwrap();
        assert!(r.boxes.is_empty());
    }

    #[test]
    fn tessellation_ratios_fall_in_disjoint_grade_bands() {
        let spec = PhantomSpec::tiny(9);
        let mut band_ranges = Vec::new();
        for g in 0..5 {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for i in 0..spec.seg_target_per_grade {
                let r = render_by_id(&spec, &format!("seg_tgt_g{g}_{i:03}")).unwrap();
                let fundus: usize = r.fundus.iter().map(|&v| v as usize).sum();
                let tess: usize = r.tessellation.iter().map(|&v| v as usize).sum();
                let ratio = tess as f64 / fundus as f64;
                lo = lo.min(ratio);
                hi = hi.max(ratio);
                let want = spec.tessellation_density[g];
                assert!(
                    (ratio - want).abs() < 0.02,
                    "grade {g}: ratio {ratio} vs density {want}"
                );
            }
            band_ranges.push((lo, hi));
        }
        for w in band_ranges.windows(2) {
            assert!(w[0].1 < w[1].0, "bands overlap: {band_ranges:?}");
        }
    }

    #[test]
    fn synthesized_dataset_loads_back_and_validates() {
        let spec = PhantomSpec::tiny(21);
        let dir = tempfile::tempdir().unwrap();
        let manifest = synthesize_phantom(&spec, dir.path()).unwrap();
        assert_eq!(manifest.entries.len(), spec.total_samples());
        let reloaded = DatasetManifest::load(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(reloaded.entries, manifest.entries);
        // every sample loads and passes validation
        for entry in reloaded.entries.iter().step_by(7) {
            reloaded.load_sample(entry).unwrap();
        }
        // target images all have an artifact mask file
        for entry in reloaded.entries.iter().filter(|e| e.domain == Domain::Target) {
            assert!(dir.path().join(format!("artifacts/{}.png", entry.id)).is_file());
        }
    }

    #[test]
    fn lesion_area_feature_separates_classes() {
        // nearest-centroid oracle on the lesion-chroma pixel fraction
        let mut spec = PhantomSpec::tiny(31);
        spec.classes = 5;
        spec.lesion_counts = vec![0, 3, 6, 10, 14];
        spec.image_size = 64;
        spec.cls_target_per_class = 12;
        let feature = |img: &RgbArray| {
            let (_, h, w) = img.dim();
            let mut count = 0usize;
            for y in 0..h {
                for x in 0..w {
                    let (r, g, b) = (img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
                    if (r + g) / 2.0 - b > 0.25 && r > 0.35 {
                        count += 1;
                    }
                }
            }
            count as f64
        };
        // first 6 per class act as the train half, rest as held-out
        let mut centroids = vec![0.0; 5];
        for c in 0..5 {
            for i in 0..6 {
                let r = render_by_id(&spec, &format!("cls_tgt_c{c}_{i:03}")).unwrap();
                centroids[c] += feature(&r.image) / 6.0;
            }
        }
        let mut correct = 0;
        let mut total = 0;
        for c in 0..5 {
            for i in 6..12 {
                let r = render_by_id(&spec, &format!("cls_tgt_c{c}_{i:03}")).unwrap();
                let f = feature(&r.image);
                let pred = (0..5)
                    .min_by(|&a, &b| {
                        (centroids[a] - f)
                            .abs()
                            .partial_cmp(&(centroids[b] - f).abs())
                            .unwrap()
                    })
                    .unwrap();
                total += 1;
                correct += usize::from(pred == c);
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc >= 0.9, "nearest-centroid accuracy {acc}");
    }
}
