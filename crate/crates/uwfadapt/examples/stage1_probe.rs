//! Hyperparameter probe for the desk-scale grader. Not part of the test
//! suite; run with e.g. EPOCHS=100 BATCH=8 LR=1e-3 cargo run --example
//! stage1_probe.

use uwfadapt::data::phantom::{render_by_id, PhantomSpec};
use uwfadapt::imgio::RgbArray;
use uwfadapt::pseudo::{train_inference_model, InferenceConfig};

fn env_or<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn main() {
    let epochs: usize = env_or("EPOCHS", 60);
    let batch: usize = env_or("BATCH", 16);
    let lr: f64 = env_or("LR", 1e-3);
    let seed: u64 = env_or("SEED", 23);

    let spec = PhantomSpec::desk(seed);
    let mut train: Vec<(RgbArray, usize)> = Vec::new();
    let mut val: Vec<(RgbArray, usize)> = Vec::new();
    for class in 0..spec.classes {
        for idx in 0..spec.cls_target_per_class {
            let id = format!("cls_tgt_c{class}_{idx}");
            let r = render_by_id(&spec, &id).unwrap();
            if idx < 32 {
                train.push((r.image, class));
            } else {
                val.push((r.image, class));
            }
        }
    }
    let config = InferenceConfig {
        classes: 5,
        epochs,
        batch_size: batch,
        lr,
        augment: true,
        seed,
    };
    let start = std::time::Instant::now();
    let (_, report) = train_inference_model(&train, &val, &config).unwrap();
    let tail = &report.val_accuracy[report.val_accuracy.len().saturating_sub(10)..];
    println!(
        "seed {seed} epochs {epochs} batch {batch} lr {lr}: final {:.3} best {:.3} tail {:?} losses(last5) {:?} [{:.1}s]",
        report.val_accuracy.last().unwrap(),
        report.val_accuracy.iter().cloned().fold(0.0, f64::max),
        tail,
        &report.epoch_losses[report.epoch_losses.len().saturating_sub(5)..],
        start.elapsed().as_secs_f64()
    );
}
