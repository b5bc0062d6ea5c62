//! Shared fixture: a pipeline config small enough to run all six stages
//! in seconds (3 classes at 32px, one generator, a few epochs each).

use std::path::Path;
use uwfadapt::data::PhantomSpec;
use uwfadapt::gan::GanConfig;
use uwfadapt::pipeline::{DataSource, PipelineConfig};
use uwfadapt::preprocess::SegmenterConfig;
use uwfadapt::pseudo::{InferenceConfig, ThresholdPolicy};
use uwfadapt::ssl::SslConfig;

pub fn tiny_config(root: &Path, seed: u64) -> PipelineConfig {
    let mut config = PipelineConfig::desk(root.join("run"), root.join("data"), seed);
    config.data = DataSource::Phantom {
        spec: PhantomSpec::tiny(5),
        dir: root.join("data"),
    };
    config.artifact_pairs = 6;
    config.segmenter = SegmenterConfig {
        resolution: 32,
        epochs: 20,
        ..SegmenterConfig::desk()
    };
    config.inference = InferenceConfig {
        classes: 3,
        epochs: 12,
        batch_size: 4,
        lr: 1e-3,
        augment: false,
        seed: 0,
    };
    config.gan = GanConfig {
        image_size: 32,
        total_epochs: 4,
        constant_epochs: 2,
        pool_size: 1,
        lambda_cr: 0.0,
        batch_size: 2,
        checkpoint_every: 2,
        ..GanConfig::desk(0)
    };
    config.gan_subsample = 8;
    config.sweep_epochs = vec![2, 4];
    config.source_budget = 12;
    config.kept_cap = 10;
    config.policy = ThresholdPolicy::Uniform { tau: 0.4 };
    config.ssl = SslConfig {
        classes: 3,
        epochs: 3,
        switch_epoch: 2,
        batch_early: 4,
        batch_late: 4,
        tau: 0.4,
        lr_decay_every: 2,
        augment: false,
        ..SslConfig::desk(0)
    };
    config
}
