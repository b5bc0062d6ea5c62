//! Command-line front end for the adaptation pipeline.
//!
//! Exit codes: 0 on success, 2 for configuration problems (including a
//! missing upstream stage and the refused long-run preset), 3 when a stage
//! fails while executing.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use uwfadapt::data::DatasetManifest;
use uwfadapt::error::{Error, Result};
use uwfadapt::gan::{train_generator_pool, GanConfig};
use uwfadapt::imgio;
use uwfadapt::pipeline::{
    run_stage, ComparisonReport, ExperimentManifest, PipelineConfig, Stage,
};
use uwfadapt::preprocess::{
    load_artifact_pairs, preprocess_dataset, train_artifact_segmenter, SegmenterConfig,
    SegmenterModel,
};
use uwfadapt::pseudo::{
    assign_pseudo_labels, filter_samples, read_pseudo_store, write_pseudo_store, InferenceModel,
    PseudoLabel, ThresholdPolicy,
};

#[derive(Parser)]
#[command(
    name = "uwfadapt",
    version,
    about = "Annotation-efficient domain adaptation for wide-field retinal imaging"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the artifact segmenter and clean datasets with it
    #[command(subcommand)]
    Preprocess(PreprocessCmd),
    /// Train the consistency-regularized translation pool
    #[command(subcommand)]
    Gan(GanCmd),
    /// Label translated images and filter them by confidence
    #[command(subcommand)]
    Pseudo(PseudoCmd),
    /// Joint training on labeled and pseudo-labeled data
    #[command(subcommand)]
    Train(TrainCmd),
    /// Compare the baseline and adapted models on the held-out test split
    Eval(ConfigArgs),
    /// Run pipeline stages against a run directory
    #[command(subcommand)]
    Pipeline(PipelineCmd),
}

#[derive(Subcommand)]
enum PreprocessCmd {
    /// Fit the segmenter on annotated artifact masks
    Train(PreprocessTrainArgs),
    /// Remove artifacts from every target image in a dataset
    Clean(PreprocessCleanArgs),
}

#[derive(Args)]
struct PreprocessTrainArgs {
    /// Dataset manifest CSV
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of ground-truth masks named `<id>.png`
    #[arg(long)]
    masks: PathBuf,
    /// Where the trained segmenter is written
    #[arg(long)]
    out: PathBuf,
    /// Cap on annotated pairs used for training (0 = all)
    #[arg(long, default_value_t = 0)]
    pairs: usize,
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PreprocessCleanArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Trained segmenter model
    #[arg(long)]
    model: PathBuf,
    /// Output directory for the cleaned dataset
    #[arg(long)]
    out: PathBuf,
    /// Mask probability cutoff
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Subcommand)]
enum GanCmd {
    /// Train the generator pool on a dataset's source and target images
    Train(GanTrainArgs),
}

#[derive(Args)]
struct GanTrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for pool checkpoints
    #[arg(long)]
    out: PathBuf,
    /// Inference model guiding the consistency term
    #[arg(long)]
    inference: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Number of independently initialized generators
    #[arg(long, default_value_t = 3)]
    pool: usize,
    #[arg(long, default_value_t = 7.0)]
    lambda_cr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum PseudoCmd {
    /// Soft-label a directory of translated images with a trained model
    Label(PseudoLabelArgs),
    /// Re-filter a pseudo-label store under a different threshold policy
    Filter(PseudoFilterArgs),
}

#[derive(Args)]
struct PseudoLabelArgs {
    /// Trained inference model
    #[arg(long)]
    model: PathBuf,
    /// Directory of PNG images; file stems become sample ids
    #[arg(long)]
    images: PathBuf,
    /// Pseudo-label store to write (JSON lines)
    #[arg(long)]
    out: PathBuf,
    /// Confidence threshold: one value, or one per class comma-separated
    #[arg(long, default_value = "0.7")]
    tau: String,
}

#[derive(Args)]
struct PseudoFilterArgs {
    /// Existing pseudo-label store
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value = "0.7")]
    tau: String,
    /// Write kept ids here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Train the baseline and adapted classifiers for a pipeline run
    Stage4(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Pipeline config TOML
    #[arg(long)]
    config: PathBuf,
    /// Consent to the full-scale preset (days of compute)
    #[arg(long)]
    allow_long: bool,
}

#[derive(Subcommand)]
enum PipelineCmd {
    /// Write a desk-scale config TOML to edit and run
    Init(PipelineInitArgs),
    /// Run all six stages in order
    Run(ConfigArgs),
    /// Run a single stage (upstream stages must be complete)
    Stage(PipelineStageArgs),
    /// Show which stages of a run are complete
    Status(PipelineStatusArgs),
}

#[derive(Args)]
struct PipelineInitArgs {
    /// Where the config TOML is written
    #[arg(long)]
    config: PathBuf,
    /// Run directory the config will point at
    #[arg(long, default_value = "runs/desk")]
    run: PathBuf,
    /// Dataset directory; defaults to $UWFADAPT_DATA_DIR, then ./data
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PipelineStageArgs {
    /// One of: preprocess, stage1_inference, stage2_gan, stage3_pseudo,
    /// stage4_train, evaluate
    stage: String,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct PipelineStatusArgs {
    /// Run directory holding experiment.json
    #[arg(long)]
    run: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) | Error::MissingStage { .. } => 2,
                _ => 3,
            };
            ExitCode::from(code)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Preprocess(PreprocessCmd::Train(args)) => preprocess_train(args),
        Command::Preprocess(PreprocessCmd::Clean(args)) => preprocess_clean(args),
        Command::Gan(GanCmd::Train(args)) => gan_train(args),
        Command::Pseudo(PseudoCmd::Label(args)) => pseudo_label(args),
        Command::Pseudo(PseudoCmd::Filter(args)) => pseudo_filter(args),
        Command::Train(TrainCmd::Stage4(args)) => run_one_stage(Stage::Stage4Train, args),
        Command::Eval(args) => run_one_stage(Stage::Evaluate, args),
        Command::Pipeline(PipelineCmd::Init(args)) => pipeline_init(args),
        Command::Pipeline(PipelineCmd::Run(args)) => pipeline_run(args),
        Command::Pipeline(PipelineCmd::Stage(args)) => {
            let stage: Stage = args.stage.parse()?;
            run_one_stage(stage, args.config)
        }
        Command::Pipeline(PipelineCmd::Status(args)) => pipeline_status(args),
    }
}

fn load_config(args: &ConfigArgs) -> Result<PipelineConfig> {
    let mut config = PipelineConfig::load(&args.config)?;
    if args.allow_long {
        config.allow_long = true;
    }
    Ok(config)
}

fn run_one_stage(stage: Stage, args: ConfigArgs) -> Result<()> {
    let config = load_config(&args)?;
    let record = run_stage(stage, &config)?;
    println!(
        "{}: ok ({} files, {:.1}s)",
        stage,
        record.outputs.len(),
        record.wall_ms as f64 / 1000.0
    );
    for (name, value) in &record.metrics {
        println!("  {name} = {value:.4}");
    }
    if stage == Stage::Evaluate {
        let report = ComparisonReport::load(&config.out_dir)?;
        println!(
            "baseline {:.2}% -> adapted {:.2}% ({:+.2} points on {} test samples)",
            report.baseline_accuracy * 100.0,
            report.adapted_accuracy * 100.0,
            report.gain_points,
            report.test_samples
        );
    }
    Ok(())
}

fn pipeline_init(args: PipelineInitArgs) -> Result<()> {
    let data = args
        .data
        .or_else(|| std::env::var_os("UWFADAPT_DATA_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"));
    let config = PipelineConfig::desk(args.run, data, args.seed);
    config.validate()?;
    config.save(&args.config)?;
    println!("wrote {}", args.config.display());
    Ok(())
}

fn pipeline_run(args: ConfigArgs) -> Result<()> {
    let config = load_config(&args)?;
    for stage in Stage::ALL {
        let record = run_stage(stage, &config)?;
        println!(
            "{}: ok ({} files, {:.1}s)",
            stage,
            record.outputs.len(),
            record.wall_ms as f64 / 1000.0
        );
    }
    let report = ComparisonReport::load(&config.out_dir)?;
    println!(
        "baseline {:.2}% -> adapted {:.2}% ({:+.2} points on {} test samples)",
        report.baseline_accuracy * 100.0,
        report.adapted_accuracy * 100.0,
        report.gain_points,
        report.test_samples
    );
    Ok(())
}

fn pipeline_status(args: PipelineStatusArgs) -> Result<()> {
    let manifest = ExperimentManifest::load(&args.run)?;
    for stage in Stage::ALL {
        match manifest.latest(stage) {
            Some(record) => println!(
                "{stage}: done ({} files, {:.1}s)",
                record.outputs.len(),
                record.wall_ms as f64 / 1000.0
            ),
            None => println!("{stage}: pending"),
        }
    }
    println!(
        "{} of {} stages complete",
        manifest.completed_stages(),
        Stage::ALL.len()
    );
    Ok(())
}

fn preprocess_train(args: PreprocessTrainArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.manifest)?;
    let mut pairs = load_artifact_pairs(&manifest, &args.masks)?;
    pairs.sort_by(|a, b| a.0.cmp(&b.0));
    if args.pairs > 0 {
        pairs.truncate(args.pairs);
    }
    let train: Vec<_> = pairs.into_iter().map(|(_, img, mask)| (img, mask)).collect();
    let config = SegmenterConfig {
        resolution: args.resolution,
        epochs: args.epochs,
        seed: args.seed,
        ..SegmenterConfig::desk()
    };
    let (model, report) = train_artifact_segmenter(&train, &config)?;
    model.save(&args.out)?;
    println!(
        "trained on {} pairs, final loss {:.4}, saved {}",
        train.len(),
        report.epoch_losses.last().unwrap_or(&f64::NAN),
        args.out.display()
    );
    Ok(())
}

fn preprocess_clean(args: PreprocessCleanArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.manifest)?;
    let mut model = SegmenterModel::load(&args.model)?;
    let (cleaned, report) = preprocess_dataset(&manifest, &mut model, args.threshold, &args.out)?;
    let mean = if report.rows.is_empty() {
        0.0
    } else {
        report.rows.iter().map(|(_, f)| f).sum::<f64>() / report.rows.len() as f64
    };
    println!(
        "cleaned {} target images ({} total), mean artifact fraction {:.3}",
        report.rows.len(),
        cleaned.entries.len(),
        mean
    );
    Ok(())
}

fn gan_train(args: GanTrainArgs) -> Result<()> {
    use uwfadapt::data::{Domain, TaskKind};
    let manifest = DatasetManifest::load(&args.manifest)?;
    let mut source = Vec::new();
    let mut target = Vec::new();
    for entry in &manifest.entries {
        if entry.task != TaskKind::Classification {
            continue;
        }
        let bucket = match entry.domain {
            Domain::Source => &mut source,
            Domain::Target => &mut target,
            Domain::GeneratedTarget => continue,
        };
        bucket.push(manifest.load_sample(entry)?.image);
    }
    let mut inference = match &args.inference {
        Some(path) => Some(InferenceModel::load(path)?),
        None => None,
    };
    let config = GanConfig {
        image_size: args.image_size,
        total_epochs: args.epochs,
        constant_epochs: args.epochs / 2,
        pool_size: args.pool,
        lambda_cr: args.lambda_cr,
        seed: args.seed,
        ..GanConfig::desk(args.seed)
    };
    let (pool, _) = train_generator_pool(
        &source,
        &target,
        inference.as_mut().map(|m| m.net_mut()),
        &config,
        &args.out,
    )?;
    println!(
        "trained {} generators on {} source / {} target images, checkpoints in {}",
        pool.checkpoints.len(),
        source.len(),
        target.len(),
        args.out.display()
    );
    Ok(())
}

fn parse_policy(tau: &str) -> Result<ThresholdPolicy> {
    let values: Vec<f64> = tau
        .split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad threshold value '{t}'")))
        })
        .collect::<Result<_>>()?;
    match values.as_slice() {
        [one] => Ok(ThresholdPolicy::Uniform { tau: *one }),
        [] => Err(Error::Config("empty threshold list".into())),
        _ => Ok(ThresholdPolicy::PerClass { tau: values }),
    }
}

fn pseudo_label(args: PseudoLabelArgs) -> Result<()> {
    let mut model = InferenceModel::load(&args.model)?;
    let policy = parse_policy(&args.tau)?;
    policy.validate(model.classes)?;

    let mut stems: Vec<String> = std::fs::read_dir(&args.images)
        .map_err(|e| Error::io(&args.images, e))?
        .filter_map(|r| r.ok())
        .filter_map(|e| {
            let path = e.path();
            if path.extension().is_some_and(|x| x == "png") {
                path.file_stem().map(|s| s.to_string_lossy().into_owned())
            } else {
                None
            }
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Invalid(format!(
            "no PNG images under {}",
            args.images.display()
        )));
    }
    let mut samples = Vec::with_capacity(stems.len());
    for stem in stems {
        let image = imgio::load_rgb(&args.images.join(format!("{stem}.png")))?;
        samples.push((stem, image));
    }
    let labels = assign_pseudo_labels(&mut model, &samples)?;
    write_pseudo_store(&args.out, &labels, &policy)?;
    let kept = filter_samples(&labels, &policy)?.len();
    println!("labeled {} images, {} pass {}", labels.len(), kept, policy.describe());
    Ok(())
}

fn pseudo_filter(args: PseudoFilterArgs) -> Result<()> {
    let policy = parse_policy(&args.tau)?;
    let records = read_pseudo_store(&args.store)?;
    let labels: Vec<PseudoLabel> = records
        .into_iter()
        .map(|r| PseudoLabel {
            id: r.id,
            q_u: r.q_u,
            confidence: r.confidence,
        })
        .collect();
    let kept = filter_samples(&labels, &policy)?;
    let mut ids: Vec<&str> = kept.iter().map(|l| l.id.as_str()).collect();
    ids.sort();
    match &args.out {
        Some(path) => {
            std::fs::write(path, ids.join("\n") + "\n").map_err(|e| Error::io(path, e))?;
            println!("{} of {} kept under {}", kept.len(), labels.len(), policy.describe());
        }
        None => {
            for id in ids {
                println!("{id}");
            }
        }
    }
    Ok(())
}
