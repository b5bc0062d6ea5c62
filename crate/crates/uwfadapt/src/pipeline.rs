//! Stage sequencing, run configuration, and persisted experiment manifests.
//!
//! A run lives in one directory. Each stage writes only beneath its own
//! subdirectory, the manifest records a sha256 per output file, and a single
//! global seed fans out into per-stage seeds, so any completed stage can be
//! rerun and checked for bit-identical outputs.

use crate::data::{
    split_dataset, DatasetManifest, Domain, LabelPayload, ManifestEntry, PhantomSpec, Split,
    TaskKind,
};
use crate::error::{Error, Result};
use crate::eval::{render_confusion, ConfusionMatrix, TessellationGrader};
use crate::gan::{generate_samples, train_generator_pool, GanConfig, GeneratorPool};
use crate::imgio::{self, RgbArray};
use crate::nn::row_max;
use crate::preprocess::{
    load_artifact_pairs, preprocess_dataset, train_artifact_segmenter, SegmenterConfig,
};
use crate::pseudo::{
    assign_pseudo_labels, classification_accuracy, filter_samples, read_pseudo_store,
    train_inference_model, write_pseudo_store, InferenceConfig, InferenceModel, ThresholdPolicy,
};
use crate::seeding::{derive_seed, rng_for};
use crate::ssl::{one_hot, train_stage4_classifier, Ablation, SslConfig};
use rand::RngExt;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalePreset {
    Desk,
    Paper,
}

/// The six pipeline stages, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "preprocess")]
    Preprocess,
    #[serde(rename = "stage1_inference")]
    Stage1Inference,
    #[serde(rename = "stage2_gan")]
    Stage2Gan,
    #[serde(rename = "stage3_pseudo")]
    Stage3Pseudo,
    #[serde(rename = "stage4_train")]
    Stage4Train,
    #[serde(rename = "evaluate")]
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Preprocess,
        Stage::Stage1Inference,
        Stage::Stage2Gan,
        Stage::Stage3Pseudo,
        Stage::Stage4Train,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::Stage1Inference => "stage1_inference",
            Stage::Stage2Gan => "stage2_gan",
            Stage::Stage3Pseudo => "stage3_pseudo",
            Stage::Stage4Train => "stage4_train",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Direct upstream stages whose outputs this stage reads.
    pub fn dependencies(self) -> &'static [Stage] {
        match self {
            Stage::Preprocess => &[],
            Stage::Stage1Inference => &[Stage::Preprocess],
            Stage::Stage2Gan => &[Stage::Preprocess, Stage::Stage1Inference],
            Stage::Stage3Pseudo => &[Stage::Preprocess, Stage::Stage1Inference, Stage::Stage2Gan],
            Stage::Stage4Train => &[Stage::Stage1Inference, Stage::Stage3Pseudo],
            Stage::Evaluate => &[Stage::Stage1Inference, Stage::Stage4Train],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|stage| stage.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown stage '{s}' (expected one of preprocess, stage1_inference, \
                     stage2_gan, stage3_pseudo, stage4_train, evaluate)"
                ))
            })
    }
}

/// Per-stage seed derived from the run's global seed.
pub fn stage_seed(seed: u64, stage: Stage) -> u64 {
    derive_seed(seed, stage.name())
}

/// Where the images come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Synthesize (or reuse, if already present) the built-in phantom
    /// dataset under `dir`.
    Phantom { spec: PhantomSpec, dir: PathBuf },
    /// An existing dataset manifest covering both domains; artifact masks
    /// are expected under `<manifest root>/artifacts/<id>.png`.
    Manifest { path: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub task: TaskKind,
    pub scale: ScalePreset,
    /// Global seed; every stage derives its own from it.
    pub seed: u64,
    pub data: DataSource,
    /// Run directory; every stage writes beneath it.
    pub out_dir: PathBuf,
    /// Required to run the paper-scale preset (days of compute).
    #[serde(default)]
    pub allow_long: bool,
    /// Train/val/test ratios for the labeled target split.
    pub split: (f64, f64, f64),
    /// How many annotated masks the artifact segmenter trains on.
    pub artifact_pairs: usize,
    pub segmenter: SegmenterConfig,
    pub binarize_threshold: f64,
    pub inference: InferenceConfig,
    pub gan: GanConfig,
    /// Per-domain image budget for translation training.
    pub gan_subsample: usize,
    /// Checkpoint epochs swept when generating samples; empty means the
    /// final checkpoint only.
    pub sweep_epochs: Vec<usize>,
    /// How many source images are translated.
    pub source_budget: usize,
    /// Upper bound on kept pseudo-labeled samples (highest confidence wins).
    pub kept_cap: usize,
    pub policy: ThresholdPolicy,
    pub ssl: SslConfig,
    /// Replaces the generated samples' labels in the adapted arm; absent
    /// means the ordinary pseudo-label path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Ablation>,
    pub grader_cutoffs: [f64; 6],
}

/// Seed of the built-in desk dataset. Fixed so that different run seeds
/// train on the same images and only the training stochasticity varies.
pub const DESK_PHANTOM_SEED: u64 = 7;

impl PipelineConfig {
    /// Desk-scale preset: the built-in 64x64 phantom, small models, minutes
    /// of CPU per run.
    pub fn desk(out_dir: impl Into<PathBuf>, data_dir: impl Into<PathBuf>, seed: u64) -> PipelineConfig {
        PipelineConfig {
            task: TaskKind::Classification,
            scale: ScalePreset::Desk,
            seed,
            data: DataSource::Phantom {
                spec: PhantomSpec::desk(DESK_PHANTOM_SEED),
                dir: data_dir.into(),
            },
            out_dir: out_dir.into(),
            allow_long: false,
            split: (0.3, 0.2, 0.5),
            artifact_pairs: 16,
            segmenter: SegmenterConfig {
                resolution: 64,
                epochs: 40,
                ..SegmenterConfig::desk()
            },
            binarize_threshold: 0.5,
            inference: InferenceConfig::desk(0),
            gan: GanConfig {
                checkpoint_every: 10,
                ..GanConfig::desk(0)
            },
            gan_subsample: 32,
            sweep_epochs: vec![20, 30],
            source_budget: 300,
            kept_cap: 500,
            policy: ThresholdPolicy::uniform_default(),
            ssl: SslConfig::desk(0),
            ablation: None,
            grader_cutoffs: TessellationGrader::default().cutoffs(),
        }
    }

    /// Full-scale preset; refused at run time unless `allow_long` is set.
    pub fn paper(
        out_dir: impl Into<PathBuf>,
        manifest_path: impl Into<PathBuf>,
        seed: u64,
    ) -> PipelineConfig {
        let mut config = PipelineConfig::desk(out_dir, PathBuf::new(), seed);
        config.scale = ScalePreset::Paper;
        config.data = DataSource::Manifest {
            path: manifest_path.into(),
        };
        config.segmenter = SegmenterConfig::paper();
        config.gan = GanConfig::paper_850(0);
        config.gan_subsample = usize::MAX / 2;
        config.sweep_epochs = vec![100, 200, 300];
        config.source_budget = usize::MAX / 2;
        config.kept_cap = usize::MAX / 2;
        config.ssl = SslConfig {
            epochs: 24,
            ..SslConfig::desk(0)
        };
        config
    }

    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("bad pipeline config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.task != TaskKind::Classification {
            return Err(Error::Config(
                "the pipeline runner covers the classification task; detection and \
                 segmentation fine-tuning are driven through the library API"
                    .into(),
            ));
        }
        let (a, b, c) = self.split;
        if a <= 0.0 || b <= 0.0 || c <= 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios ({a}, {b}, {c}) must be positive and sum to 1"
            )));
        }
        if self.artifact_pairs == 0 {
            return Err(Error::Config("artifact_pairs must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.binarize_threshold) {
            return Err(Error::Config("binarize_threshold must lie in [0,1]".into()));
        }
        if self.source_budget == 0 || self.gan_subsample == 0 {
            return Err(Error::Config("image budgets must be >= 1".into()));
        }
        self.gan.validate()?;
        self.ssl.validate()?;
        if self.inference.classes != self.ssl.classes {
            return Err(Error::Config(format!(
                "inference model has {} classes but joint training expects {}",
                self.inference.classes, self.ssl.classes
            )));
        }
        self.policy.validate(self.inference.classes)?;
        TessellationGrader::new(self.grader_cutoffs)?;
        match &self.data {
            DataSource::Phantom { spec, .. } => {
                spec.validate()?;
                if spec.classes != self.inference.classes {
                    return Err(Error::Config(format!(
                        "phantom has {} classes but the inference model expects {}",
                        spec.classes, self.inference.classes
                    )));
                }
                if spec.image_size != self.gan.image_size {
                    return Err(Error::Config(format!(
                        "phantom renders {}px images but the translation model expects {}px",
                        spec.image_size, self.gan.image_size
                    )));
                }
            }
            DataSource::Manifest { path } => {
                if !path.is_file() {
                    return Err(Error::Config(format!(
                        "dataset manifest {} does not exist",
                        path.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One completed stage execution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub seed: u64,
    pub wall_ms: u64,
    /// Relative path -> sha256 of every file the stage wrote.
    pub outputs: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
}

/// Append-only record of a run: the config snapshot plus one entry per
/// completed stage execution. Reruns append; nothing is rewritten.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub config: PipelineConfig,
    pub records: Vec<StageRecord>,
}

pub fn manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("experiment.json")
}

impl ExperimentManifest {
    pub fn load(out_dir: &Path) -> Result<ExperimentManifest> {
        let path = manifest_path(out_dir);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self) -> Result<()> {
        let path = manifest_path(&self.config.out_dir);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&path, e))
    }

    /// Most recent record for a stage, if it ever completed.
    pub fn latest(&self, stage: Stage) -> Option<&StageRecord> {
        self.records.iter().rev().find(|r| r.stage == stage)
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.latest(stage).is_some()
    }

    /// Number of distinct completed stages.
    pub fn completed_stages(&self) -> usize {
        Stage::ALL.iter().filter(|&&s| self.is_complete(s)).count()
    }
}

fn open_manifest(config: &PipelineConfig) -> Result<ExperimentManifest> {
    if manifest_path(&config.out_dir).is_file() {
        let existing = ExperimentManifest::load(&config.out_dir)?;
        // the long-run consent flag is per invocation, not part of the
        // run's identity
        let neutral = |c: &PipelineConfig| {
            let mut c = c.clone();
            c.allow_long = false;
            serde_json::to_value(c)
        };
        let same = neutral(&existing.config)? == neutral(config)?;
        if !same {
            return Err(Error::Config(format!(
                "{} already holds a run with a different configuration",
                config.out_dir.display()
            )));
        }
        Ok(existing)
    } else {
        Ok(ExperimentManifest {
            config: config.clone(),
            records: Vec::new(),
        })
    }
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|r| r.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("walk stays under root")
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            out.push(rel);
        }
    }
    Ok(())
}

/// sha256 of every file under `dir`, keyed by `/`-joined relative path.
pub fn hash_dir(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut out = BTreeMap::new();
    for rel in files {
        out.insert(rel.clone(), hash_file(&dir.join(&rel))?);
    }
    Ok(out)
}

struct StageCtx<'a> {
    config: &'a PipelineConfig,
    run_dir: &'a Path,
    stage_dir: PathBuf,
    seed: u64,
}

/// Executes one stage, hashes its outputs, and appends the record to the
/// persisted manifest. Fails if any direct dependency never completed.
pub fn run_stage(stage: Stage, config: &PipelineConfig) -> Result<StageRecord> {
    config.validate()?;
    if config.scale == ScalePreset::Paper && !config.allow_long {
        return Err(Error::Config(
            "the paper-scale preset takes days of compute; set allow_long to run it".into(),
        ));
    }
    let mut manifest = open_manifest(config)?;
    for &dep in stage.dependencies() {
        if !manifest.is_complete(dep) {
            return Err(Error::MissingStage {
                stage: stage.name().into(),
                missing: dep.name().into(),
            });
        }
    }

    let ctx = StageCtx {
        config,
        run_dir: &config.out_dir,
        stage_dir: config.out_dir.join(stage.name()),
        seed: stage_seed(config.seed, stage),
    };
    // a rerun replaces the stage directory wholesale, so the recorded
    // hashes always describe exactly one execution
    if ctx.stage_dir.exists() {
        std::fs::remove_dir_all(&ctx.stage_dir).map_err(|e| Error::io(&ctx.stage_dir, e))?;
    }
    std::fs::create_dir_all(&ctx.stage_dir).map_err(|e| Error::io(&ctx.stage_dir, e))?;

    let start = Instant::now();
    let metrics = execute(stage, &ctx).map_err(|e| Error::StageFailed {
        stage: stage.name().into(),
        message: e.to_string(),
    })?;
    let record = StageRecord {
        stage,
        seed: ctx.seed,
        wall_ms: start.elapsed().as_millis() as u64,
        outputs: hash_dir(&ctx.stage_dir)?,
        metrics,
    };
    manifest.records.push(record.clone());
    manifest.save()?;
    Ok(record)
}

/// Runs all six stages in order and returns the final manifest.
pub fn run_pipeline(config: &PipelineConfig) -> Result<ExperimentManifest> {
    for stage in Stage::ALL {
        run_stage(stage, config)?;
    }
    ExperimentManifest::load(&config.out_dir)
}

fn execute(stage: Stage, ctx: &StageCtx) -> Result<BTreeMap<String, f64>> {
    match stage {
        Stage::Preprocess => stage_preprocess(ctx),
        Stage::Stage1Inference => stage_inference(ctx),
        Stage::Stage2Gan => stage_gan(ctx),
        Stage::Stage3Pseudo => stage_pseudo(ctx),
        Stage::Stage4Train => stage_train(ctx),
        Stage::Evaluate => stage_evaluate(ctx),
    }
}

fn dataset_manifest(config: &PipelineConfig) -> Result<DatasetManifest> {
    match &config.data {
        DataSource::Phantom { spec, dir } => {
            let path = dir.join("manifest.csv");
            if path.is_file() {
                DatasetManifest::load(&path)
            } else {
                crate::data::synthesize_phantom(spec, dir)
            }
        }
        DataSource::Manifest { path } => DatasetManifest::load(path),
    }
}

fn shuffle<T>(items: &mut [T], rng: &mut rand_chacha::ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

fn stage_preprocess(ctx: &StageCtx) -> Result<BTreeMap<String, f64>> {
    let manifest = dataset_manifest(ctx.config)?;
    let masks_dir = manifest.root().join("artifacts");
    let mut pairs = load_artifact_pairs(&manifest, &masks_dir)?;
    if pairs.is_empty() {
        return Err(Error::Invalid(format!(
            "no artifact masks found under {}",
            masks_dir.display()
        )));
    }
    pairs.sort_by(|a, b| a.0.cmp(&b.0));
    let mut rng = rng_for(ctx.seed, "preprocess/pair-subset");
    shuffle(&mut pairs, &mut rng);
    pairs.truncate(ctx.config.artifact_pairs);
    let train: Vec<_> = pairs.into_iter().map(|(_, img, mask)| (img, mask)).collect();

    let seg_config = SegmenterConfig {
        seed: ctx.seed,
        ..ctx.config.segmenter.clone()
    };
    let (mut model, report) = train_artifact_segmenter(&train, &seg_config)?;
    model.save(&ctx.stage_dir.join("segmenter.json"))?;

    let cleaned_dir = ctx.stage_dir.join("cleaned");
    let (cleaned, prep) = preprocess_dataset(
        &manifest,
        &mut model,
        ctx.config.binarize_threshold,
        &cleaned_dir,
    )?;
    prep.save(&ctx.stage_dir.join("report.csv"))?;

    let mean_fraction = if prep.rows.is_empty() {
        0.0
    } else {
        prep.rows.iter().map(|(_, f)| f).sum::<f64>() / prep.rows.len() as f64
    };
    Ok(BTreeMap::from([
        ("mask_pairs".into(), train.len() as f64),
        ("final_train_loss".into(), *report.epoch_losses.last().unwrap_or(&f64::NAN)),
        ("images".into(), cleaned.entries.len() as f64),
        ("mean_artifact_fraction".into(), mean_fraction),
    ]))
}

fn cleaned_manifest_path(run_dir: &Path) -> PathBuf {
    run_dir.join("preprocess/cleaned/manifest.csv")
}

fn split_manifest_path(run_dir: &Path) -> PathBuf {
    run_dir.join("stage1_inference/split.csv")
}

fn inference_model_path(run_dir: &Path) -> PathBuf {
    run_dir.join("stage1_inference/model.json")
}

/// Classification samples of one split, as (image, class) pairs.
fn cls_split_samples(manifest: &DatasetManifest, split: Split) -> Result<Vec<(RgbArray, usize)>> {
    let mut out = Vec::new();
    for entry in manifest.in_split(split) {
        let sample = manifest.load_sample(entry)?;
        let class = sample
            .label
            .as_ref()
            .and_then(LabelPayload::class_index)
            .ok_or_else(|| Error::sample(&entry.id, "sample lacks a class label"))?;
        out.push((sample.image, class));
    }
    Ok(out)
}

fn stage_inference(ctx: &StageCtx) -> Result<BTreeMap<String, f64>> {
    let cleaned = DatasetManifest::load(&cleaned_manifest_path(ctx.run_dir))?;
    // the labeled-target split lives in this stage's own directory, with
    // paths pointing back into the cleaned dataset
    let mut sub = DatasetManifest::new(&ctx.stage_dir, cleaned.seed);
    for entry in &cleaned.entries {
        if entry.domain != Domain::Target || entry.task != TaskKind::Classification {
            continue;
        }
        sub.push(ManifestEntry {
            id: entry.id.clone(),
            path: format!("../preprocess/cleaned/{}", entry.path),
            domain: entry.domain,
            task: entry.task,
            label_ref: entry
                .label_ref
                .as_ref()
                .map(|r| format!("../preprocess/cleaned/{r}")),
            split: None,
        });
    }
    if sub.entries.is_empty() {
        return Err(Error::Invalid(
            "dataset has no labeled target classification images".into(),
        ));
    }
    split_dataset(&mut sub, ctx.config.split, ctx.seed)?;
    sub.save(&ctx.stage_dir.join("split.csv"))?;

    let train = cls_split_samples(&sub, Split::Train)?;
    let val = cls_split_samples(&sub, Split::Val)?;
    let config = InferenceConfig {
        seed: ctx.seed,
        ..ctx.config.inference.clone()
    };
    let (model, report) = train_inference_model(&train, &val, &config)?;
    model.save(&ctx.stage_dir.join("model.json"))?;

    let mut history = String::from("epoch,train_loss,val_accuracy\n");
    for (epoch, (loss, acc)) in report
        .epoch_losses
        .iter()
        .zip(&report.val_accuracy)
        .enumerate()
    {
        history.push_str(&format!("{epoch},{loss},{acc}\n"));
    }
    let history_path = ctx.stage_dir.join("history.csv");
    std::fs::write(&history_path, history).map_err(|e| Error::io(&history_path, e))?;

    Ok(BTreeMap::from([
        ("train_samples".into(), train.len() as f64),
        ("val_samples".into(), val.len() as f64),
        ("val_accuracy".into(), *report.val_accuracy.last().unwrap_or(&0.0)),
    ]))
}

/// Target images the translation model may train on: the train and val
/// splits only, so the held-out test images stay unseen end to end.
fn gan_target_pool(split: &DatasetManifest) -> Vec<&ManifestEntry> {
    split
        .entries
        .iter()
        .filter(|e| matches!(e.split, Some(Split::Train) | Some(Split::Val)))
        .collect()
}

fn stage_gan(ctx: &StageCtx) -> Result<BTreeMap<String, f64>> {
    let cleaned = DatasetManifest::load(&cleaned_manifest_path(ctx.run_dir))?;
    let split = DatasetManifest::load(&split_manifest_path(ctx.run_dir))?;
    let mut rng = rng_for(ctx.seed, "gan/subsample");

    let mut source_entries: Vec<&ManifestEntry> = cleaned
        .entries
        .iter()
        .filter(|e| e.domain == Domain::Source && e.task == TaskKind::Classification)
        .collect();
    shuffle(&mut source_entries, &mut rng);
    source_entries.truncate(ctx.config.gan_subsample);
    let source: Vec<RgbArray> = source_entries
        .iter()
        .map(|e| cleaned.load_sample(e).map(|s| s.image))
        .collect::<Result<_>>()?;

    let mut target_entries = gan_target_pool(&split);
    shuffle(&mut target_entries, &mut rng);
    target_entries.truncate(ctx.config.gan_subsample);
    let target: Vec<RgbArray> = target_entries
        .iter()
        .map(|e| split.load_sample(e).map(|s| s.image))
        .collect::<Result<_>>()?;

    let mut h = InferenceModel::load(&inference_model_path(ctx.run_dir))?;
    let config = GanConfig {
        seed: ctx.seed,
        ..ctx.config.gan.clone()
    };
    let (pool, report) =
        train_generator_pool(&source, &target, Some(h.net_mut()), &config, &ctx.stage_dir.join("pool"))?;

    let mut metrics = BTreeMap::from([
        ("source_images".into(), source.len() as f64),
        ("target_images".into(), target.len() as f64),
        ("generators".into(), pool.checkpoints.len() as f64),
    ]);
    if let Some(last) = report.per_generator.last().and_then(|log| log.last()) {
        metrics.insert("final_cycle_loss".into(), last.cycle);
        metrics.insert("final_adv_loss".into(), last.adv_st);
    }
    Ok(metrics)
}

/// Class encoded in a generated sample's id, which keeps the source id as
/// its prefix (`cls_src_c3_017-g1e20` came from class 3).
pub fn source_class_of_generated(id: &str) -> Option<usize> {
    let (source_id, _) = id.rsplit_once('-')?;
    let mut parts = source_id.split('_');
    if parts.next() != Some("cls") {
        return None;
    }
    parts.next()?;
    parts.next()?.strip_prefix('c')?.parse().ok()
}

fn stage_pseudo(ctx: &StageCtx) -> Result<BTreeMap<String, f64>> {
    let cleaned = DatasetManifest::load(&cleaned_manifest_path(ctx.run_dir))?;
    let pool = GeneratorPool::load(&ctx.run_dir.join("stage2_gan/pool"))?;
    let mut h = InferenceModel::load(&inference_model_path(ctx.run_dir))?;

    let mut source_entries: Vec<&ManifestEntry> = cleaned
        .entries
        .iter()
        .filter(|e| e.domain == Domain::Source && e.task == TaskKind::Classification)
        .collect();
    let mut rng = rng_for(ctx.seed, "pseudo/source-subset");
    shuffle(&mut source_entries, &mut rng);
    source_entries.truncate(ctx.config.source_budget);
    let sources: Vec<(String, RgbArray)> = source_entries
        .iter()
        .map(|e| cleaned.load_sample(e).map(|s| (e.id.clone(), s.image)))
        .collect::<Result<_>>()?;

    let sweep: Vec<usize> = if ctx.config.sweep_epochs.is_empty() {
        pool.available_epochs(1).last().copied().into_iter().collect()
    } else {
        ctx.config.sweep_epochs.clone()
    };
    let mut generated = Vec::new();
    for &epoch in &sweep {
        generated.extend(generate_samples(&pool, &sources, epoch, false)?);
    }

    let pairs: Vec<(String, RgbArray)> = generated
        .iter()
        .map(|g| (g.id.clone(), g.image.clone()))
        .collect();
    let labels = assign_pseudo_labels(&mut h, &pairs)?;
    write_pseudo_store(&ctx.stage_dir.join("pseudo.jsonl"), &labels, &ctx.config.policy)?;

    let mut kept = filter_samples(&labels, &ctx.config.policy)?;
    let kept_by_policy = kept.len();
    kept.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.id.cmp(&b.id)));
    kept.truncate(ctx.config.kept_cap);

    let image_dir = ctx.stage_dir.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let by_id: BTreeMap<&str, &RgbArray> =
        pairs.iter().map(|(id, img)| (id.as_str(), img)).collect();
    let mut kept_ids: Vec<&str> = kept.iter().map(|l| l.id.as_str()).collect();
    kept_ids.sort();
    for id in &kept_ids {
        let img = by_id.get(id).expect("kept id came from the candidate set");
        imgio::save_rgb(img, &image_dir.join(format!("{id}.png")))?;
    }
    let list_path = ctx.stage_dir.join("kept.txt");
    std::fs::write(&list_path, kept_ids.join("\n") + "\n").map_err(|e| Error::io(&list_path, e))?;

    let mean_confidence = if kept.is_empty() {
        0.0
    } else {
        kept.iter().map(|l| l.confidence).sum::<f64>() / kept.len() as f64
    };
    Ok(BTreeMap::from([
        ("candidates".into(), labels.len() as f64),
        ("kept_by_policy".into(), kept_by_policy as f64),
        ("materialized".into(), kept.len() as f64),
        ("mean_kept_confidence".into(), mean_confidence),
    ]))
}

/// Loads the materialized generated samples with their stored label rows.
fn load_generated(run_dir: &Path) -> Result<Vec<(String, RgbArray, Vec<f64>)>> {
    let stage3 = run_dir.join("stage3_pseudo");
    let list_path = stage3.join("kept.txt");
    let listing = std::fs::read_to_string(&list_path).map_err(|e| Error::io(&list_path, e))?;
    let store = read_pseudo_store(&stage3.join("pseudo.jsonl"))?;
    let q_by_id: BTreeMap<&str, &Vec<f64>> =
        store.iter().map(|r| (r.id.as_str(), &r.q_u)).collect();
    let mut out = Vec::new();
    for id in listing.lines().filter(|l| !l.trim().is_empty()) {
        let image = imgio::load_rgb(&stage3.join("images").join(format!("{id}.png")))?;
        let q = q_by_id
            .get(id)
            .ok_or_else(|| Error::sample(id, "kept sample missing from the pseudo store"))?;
        out.push((id.to_string(), image, (*q).clone()));
    }
    Ok(out)
}

fn stage_train(ctx: &StageCtx) -> Result<BTreeMap<String, f64>> {
    let split = DatasetManifest::load(&split_manifest_path(ctx.run_dir))?;
    let train = cls_split_samples(&split, Split::Train)?;
    let val = cls_split_samples(&split, Split::Val)?;
    let h = InferenceModel::load(&inference_model_path(ctx.run_dir))?;
    let classes = ctx.config.ssl.classes;

    let mut generated: Vec<(RgbArray, Vec<f64>)> = Vec::new();
    let mut ids = Vec::new();
    for (id, image, q) in load_generated(ctx.run_dir)? {
        ids.push(id);
        generated.push((image, q));
    }
    match ctx.config.ablation {
        None => {}
        Some(Ablation::None) => {
            generated.clear();
        }
        Some(Ablation::Gt) => {
            for (row, id) in generated.iter_mut().zip(&ids) {
                let class = source_class_of_generated(id).ok_or_else(|| {
                    Error::sample(id, "cannot recover a ground-truth class from this id")
                })?;
                row.1 = one_hot(class, classes);
            }
        }
        Some(Ablation::Random) => {
            let mut rng = rng_for(ctx.seed, "ablation/random-labels");
            for row in &mut generated {
                row.1 = one_hot(rng.random_range(0..classes), classes);
            }
        }
        Some(Ablation::Weak) => {
            let weak_config = InferenceConfig {
                epochs: 1,
                seed: derive_seed(ctx.seed, "ablation/weak"),
                ..ctx.config.inference.clone()
            };
            let (mut weak, _) = train_inference_model(&train, &val, &weak_config)?;
            let pairs: Vec<(String, RgbArray)> = ids
                .iter()
                .zip(&generated)
                .map(|(id, (img, _))| (id.clone(), img.clone()))
                .collect();
            for (row, label) in generated.iter_mut().zip(assign_pseudo_labels(&mut weak, &pairs)?) {
                row.1 = label.q_u;
            }
        }
    }

    let config = SslConfig {
        seed: ctx.seed,
        ..ctx.config.ssl.clone()
    };
    let (baseline, baseline_report) = train_stage4_classifier(Some(&h), &train, &val, &[], &config)?;
    baseline.save(&ctx.stage_dir.join("baseline.json"))?;
    baseline_report.save_metric_csv(&ctx.stage_dir.join("baseline_history.csv"))?;

    let (adapted, adapted_report) =
        train_stage4_classifier(Some(&h), &train, &val, &generated, &config)?;
    adapted.save(&ctx.stage_dir.join("adapted.json"))?;
    adapted_report.save_metric_csv(&ctx.stage_dir.join("adapted_history.csv"))?;

    let last_val = |r: &crate::ssl::Stage4Report| {
        r.epochs.last().map(|e| e.val_accuracy).unwrap_or(0.0)
    };
    Ok(BTreeMap::from([
        ("generated_samples".into(), generated.len() as f64),
        ("baseline_val_accuracy".into(), last_val(&baseline_report)),
        ("adapted_val_accuracy".into(), last_val(&adapted_report)),
    ]))
}

/// Final test-set comparison between the supervised baseline and the
/// adaptation-trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline_accuracy: f64,
    pub adapted_accuracy: f64,
    /// Adapted minus baseline, in percentage points.
    pub gain_points: f64,
    pub test_samples: usize,
}

impl ComparisonReport {
    pub fn load(run_dir: &Path) -> Result<ComparisonReport> {
        let path = run_dir.join("evaluate/report.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

fn test_confusion(
    model: &mut InferenceModel,
    samples: &[(RgbArray, usize)],
) -> Result<ConfusionMatrix> {
    let images: Vec<RgbArray> = samples.iter().map(|(img, _)| img.clone()).collect();
    let probs = model.predict_probs(&images)?;
    let pairs = row_max(&probs)
        .into_iter()
        .zip(samples)
        .map(|((pred, _), (_, truth))| (*truth, pred));
    Ok(ConfusionMatrix::from_pairs(model.classes, pairs))
}

fn stage_evaluate(ctx: &StageCtx) -> Result<BTreeMap<String, f64>> {
    let split = DatasetManifest::load(&split_manifest_path(ctx.run_dir))?;
    let test = cls_split_samples(&split, Split::Test)?;
    let stage4 = ctx.run_dir.join("stage4_train");
    let mut baseline = InferenceModel::load(&stage4.join("baseline.json"))?;
    let mut adapted = InferenceModel::load(&stage4.join("adapted.json"))?;

    let baseline_accuracy = classification_accuracy(&mut baseline, &test)?;
    let adapted_accuracy = classification_accuracy(&mut adapted, &test)?;
    let report = ComparisonReport {
        baseline_accuracy,
        adapted_accuracy,
        gain_points: (adapted_accuracy - baseline_accuracy) * 100.0,
        test_samples: test.len(),
    };
    let report_path = ctx.stage_dir.join("report.json");
    std::fs::write(&report_path, serde_json::to_vec_pretty(&report)?)
        .map_err(|e| Error::io(&report_path, e))?;

    let text = format!(
        "baseline test confusion\n{}\nadapted test confusion\n{}",
        render_confusion(&test_confusion(&mut baseline, &test)?),
        render_confusion(&test_confusion(&mut adapted, &test)?),
    );
    let text_path = ctx.stage_dir.join("confusion.txt");
    std::fs::write(&text_path, text).map_err(|e| Error::io(&text_path, e))?;

    Ok(BTreeMap::from([
        ("baseline_accuracy".into(), baseline_accuracy),
        ("adapted_accuracy".into(), adapted_accuracy),
        ("gain_points".into(), report.gain_points),
        ("test_samples".into(), test.len() as f64),
    ]))
}
