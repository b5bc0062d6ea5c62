//! Unpaired source-to-target translation with a pool of K generators.
//!
//! Generator 1 trains the plain cycle-consistent objective; generators k >= 2
//! add a consistency term that pulls the task model's predictions on their
//! outputs toward its predictions on a previously trained generator's
//! outputs. Every epoch checkpoint is retained so sample generation can sweep
//! early-stopped generators.

use crate::error::{Error, Result};
use crate::imgio::RgbArray;
use crate::nn::{l1_pair, mse_to_const, probs_matrix, probs_to_batch, Adam, Batch, LayerSpec, Net, SavedNet};
use crate::seeding::rng_for;
use ndarray::{Array2, Array3, Array4, Axis};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Relative weights of the cycle-consistent objective's components.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub adversarial: f64,
    pub cycle: f64,
    pub identity: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            adversarial: 1.0,
            cycle: 10.0,
            identity: 5.0,
        }
    }
}

/// Label-preserving augmentation: flips and quarter turns only, so boxes,
/// masks, and class labels stay valid under every op.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub flips: bool,
    pub rotations: bool,
}

impl Default for AugmentationSpec {
    fn default() -> AugmentationSpec {
        AugmentationSpec {
            flips: true,
            rotations: true,
        }
    }
}

impl AugmentationSpec {
    pub fn identity() -> AugmentationSpec {
        AugmentationSpec {
            flips: false,
            rotations: false,
        }
    }

    /// Applies one independently sampled op combination per image.
    pub fn apply_batch(&self, x: &Batch, rng: &mut ChaCha8Rng) -> Batch {
        let (n, _, h, w) = x.dim();
        let mut out = x.clone();
        for i in 0..n {
            let hflip = self.flips && rng.random::<f64>() < 0.5;
            let vflip = self.flips && rng.random::<f64>() < 0.5;
            let turns = if self.rotations {
                assert_eq!(h, w, "rotation augmentation needs square images");
                rng.random_range(0..4u8)
            } else {
                0
            };
            let img = transform_image(&x.index_axis(Axis(0), i).to_owned(), hflip, vflip, turns);
            out.index_axis_mut(Axis(0), i).assign(&img);
        }
        out
    }
}

/// Flips then rotates clockwise by `turns` quarter turns.
pub fn transform_image(img: &Array3<f64>, hflip: bool, vflip: bool, turns: u8) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let mut cur = Array3::from_shape_fn((c, h, w), |(ci, y, x)| {
        let sy = if vflip { h - 1 - y } else { y };
        let sx = if hflip { w - 1 - x } else { x };
        img[[ci, sy, sx]]
    });
    for _ in 0..turns % 4 {
        let (c, h, w) = cur.dim();
        cur = Array3::from_shape_fn((c, w, h), |(ci, y, x)| cur[[ci, h - 1 - x, y]]);
    }
    cur
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanConfig {
    pub image_size: usize,
    pub total_epochs: usize,
    /// Epochs at the base learning rate before the linear decay to zero.
    pub constant_epochs: usize,
    pub base_lr: f64,
    pub betas: (f64, f64),
    /// Number of generators in the pool (K).
    pub pool_size: usize,
    /// Weight of the consistency term for generators k >= 2.
    pub lambda_cr: f64,
    pub weights: LossWeights,
    pub batch_size: usize,
    /// Checkpoint every this many epochs; the final epoch is always kept.
    pub checkpoint_every: usize,
    /// The consistency distance sums over output dimensions by default;
    /// set to average instead.
    pub cr_mean_over_dims: bool,
    pub augmentation: AugmentationSpec,
    pub seed: u64,
}

impl GanConfig {
    pub fn desk(seed: u64) -> GanConfig {
        GanConfig {
            image_size: 64,
            total_epochs: 30,
            constant_epochs: 15,
            base_lr: 2e-4,
            betas: (0.5, 0.999),
            pool_size: 3,
            lambda_cr: 7.0,
            weights: LossWeights::default(),
            batch_size: 4,
            checkpoint_every: 1,
            cr_mean_over_dims: false,
            augmentation: AugmentationSpec::default(),
            seed,
        }
    }

    pub fn paper_512(seed: u64) -> GanConfig {
        GanConfig {
            image_size: 512,
            total_epochs: 150,
            constant_epochs: 100,
            checkpoint_every: 10,
            ..GanConfig::desk(seed)
        }
    }

    pub fn paper_850(seed: u64) -> GanConfig {
        GanConfig {
            image_size: 850,
            total_epochs: 300,
            constant_epochs: 100,
            checkpoint_every: 10,
            ..GanConfig::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_size < 1 {
            return Err(Error::Config("pool size must be >= 1".into()));
        }
        if self.lambda_cr < 0.0 {
            return Err(Error::Config("lambda_cr must be >= 0".into()));
        }
        if self.constant_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "constant epochs {} exceed total epochs {}",
                self.constant_epochs, self.total_epochs
            )));
        }
        if self.total_epochs == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "epochs, batch size and checkpoint cadence must be positive".into(),
            ));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image size must be >= 8".into()));
        }
        Ok(())
    }
}

/// Learning rate schedule: constant, then linear decay reaching 0 exactly at
/// `total_epochs`.
pub fn lr_at_epoch(epoch: usize, config: &GanConfig) -> Result<f64> {
    if epoch >= config.total_epochs {
        return Err(Error::Invalid(format!(
            "epoch {epoch} outside schedule of {} epochs",
            config.total_epochs
        )));
    }
    if epoch < config.constant_epochs {
        return Ok(config.base_lr);
    }
    let span = (config.total_epochs - config.constant_epochs) as f64;
    Ok(config.base_lr * (config.total_epochs - epoch) as f64 / span)
}

/// Source->target and target->source generators plus one least-squares patch
/// discriminator per domain.
pub struct CycleGan {
    pub g_st: Net,
    pub g_ts: Net,
    pub d_t: Net,
    pub d_s: Net,
}

pub fn generator_spec() -> Vec<LayerSpec> {
    vec![
        LayerSpec::CoordConcat,
        LayerSpec::Conv { in_c: 6, out_c: 12, kernel: 3, stride: 1, pad: 1 },
        LayerSpec::LeakyRelu { alpha: 0.2 },
        LayerSpec::Residual {
            inner: vec![
                LayerSpec::Conv { in_c: 12, out_c: 12, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::LeakyRelu { alpha: 0.2 },
                LayerSpec::Conv { in_c: 12, out_c: 12, kernel: 3, stride: 1, pad: 1 },
            ],
        },
        LayerSpec::LeakyRelu { alpha: 0.2 },
        LayerSpec::Conv { in_c: 12, out_c: 3, kernel: 3, stride: 1, pad: 1 },
        LayerSpec::Sigmoid,
    ]
}

pub fn discriminator_spec() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv { in_c: 3, out_c: 8, kernel: 3, stride: 2, pad: 1 },
        LayerSpec::LeakyRelu { alpha: 0.2 },
        LayerSpec::Conv { in_c: 8, out_c: 16, kernel: 3, stride: 2, pad: 1 },
        LayerSpec::LeakyRelu { alpha: 0.2 },
        LayerSpec::Conv { in_c: 16, out_c: 1, kernel: 3, stride: 1, pad: 1 },
    ]
}

impl CycleGan {
    pub fn new(rng: &mut ChaCha8Rng) -> CycleGan {
        CycleGan::with_specs(generator_spec(), discriminator_spec(), rng)
    }

    pub fn with_specs(
        gen: Vec<LayerSpec>,
        disc: Vec<LayerSpec>,
        rng: &mut ChaCha8Rng,
    ) -> CycleGan {
        CycleGan {
            g_st: Net::new(gen.clone(), rng),
            g_ts: Net::new(gen, rng),
            d_t: Net::new(disc.clone(), rng),
            d_s: Net::new(disc, rng),
        }
    }
}

/// Loss components of one generator-side step. All components are
/// non-negative for the least-squares adversarial form.
#[derive(Debug, Clone, Copy, Default)]
pub struct GanStepLosses {
    pub adv_st: f64,
    pub adv_ts: f64,
    pub cycle: f64,
    pub identity: f64,
    pub cr: f64,
}

impl GanStepLosses {
    pub fn total(&self, weights: &LossWeights, lambda_cr: f64) -> f64 {
        weights.adversarial * (self.adv_st + self.adv_ts)
            + weights.cycle * self.cycle
            + weights.identity * self.identity
            + lambda_cr * self.cr
    }

    pub fn is_finite(&self) -> bool {
        [self.adv_st, self.adv_ts, self.cycle, self.identity, self.cr]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Frozen inputs for the consistency term of one step: the base generator's
/// output on the clean source batch, and the augmented source batch fed to
/// the generator in training.
pub struct CrInputs<'a> {
    pub base_out: &'a Batch,
    pub aug_src: &'a Batch,
}

pub struct GeneratorStepOutput {
    pub losses: GanStepLosses,
    pub fake_t: Batch,
    pub fake_s: Batch,
}

/// Generator-side objective. With `train` the same pass accumulates
/// gradients into both generators, so finite-difference tests exercise the
/// exact computation used in training.
pub fn generator_step(
    gan: &mut CycleGan,
    mut inference: Option<&mut Net>,
    xs: &Batch,
    xt: &Batch,
    cr: Option<CrInputs<'_>>,
    config: &GanConfig,
    train: bool,
) -> Result<GeneratorStepOutput> {
    let (ns, cs, hs, ws) = xs.dim();
    let (nt, ct, ht, wt) = xt.dim();
    if ns == 0 || nt == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    if (cs, hs, ws) != (ct, ht, wt) {
        return Err(Error::Shape(format!(
            "source images {hs}x{ws} vs target images {ht}x{wt}"
        )));
    }
    let w = &config.weights;
    let mut losses = GanStepLosses::default();

    // source -> target -> source
    let fake_t = gan.g_st.forward(xs, train);
    let (adv_st, g_adv) = mse_to_const(&gan.d_t.forward(&fake_t, train), 1.0);
    losses.adv_st = adv_st;
    let rec_s = gan.g_ts.forward(&fake_t, train);
    let (cyc_s, g_cyc) = l1_pair(&rec_s, xs);
    if train {
        let g1 = gan.d_t.backward(&g_adv.mapv(|v| v * w.adversarial));
        let g2 = gan.g_ts.backward(&g_cyc.mapv(|v| v * w.cycle));
        gan.g_st.backward(&(g1 + g2));
    }

    // target -> source -> target
    let fake_s = gan.g_ts.forward(xt, train);
    let (adv_ts, g_adv) = mse_to_const(&gan.d_s.forward(&fake_s, train), 1.0);
    losses.adv_ts = adv_ts;
    let rec_t = gan.g_st.forward(&fake_s, train);
    let (cyc_t, g_cyc) = l1_pair(&rec_t, xt);
    losses.cycle = cyc_s + cyc_t;
    if train {
        let g1 = gan.d_s.backward(&g_adv.mapv(|v| v * w.adversarial));
        let g2 = gan.g_st.backward(&g_cyc.mapv(|v| v * w.cycle));
        gan.g_ts.backward(&(g1 + g2));
    }

    // identity mapping on each generator's own output domain
    let idt_t = gan.g_st.forward(xt, train);
    let (idt_lt, g_idt) = l1_pair(&idt_t, xt);
    if train {
        gan.g_st.backward(&g_idt.mapv(|v| v * w.identity));
    }
    let idt_s = gan.g_ts.forward(xs, train);
    let (idt_ls, g_idt) = l1_pair(&idt_s, xs);
    losses.identity = idt_lt + idt_ls;
    if train {
        gan.g_ts.backward(&g_idt.mapv(|v| v * w.identity));
    }

    // consistency against the frozen base generator's output
    if let Some(cr_in) = cr {
        let h = inference
            .as_deref_mut()
            .ok_or_else(|| Error::Config("consistency term needs an inference model".into()))?;
        let a = probs_matrix(&h.forward(cr_in.base_out, false));
        let b_img = gan.g_st.forward(cr_in.aug_src, train);
        let b = probs_matrix(&h.forward(&b_img, train));
        let (cr_val, g_b) = cr_from_outputs(&a, &b, config.cr_mean_over_dims);
        losses.cr = cr_val;
        if train && config.lambda_cr != 0.0 {
            let g_img = h.backward(&probs_to_batch(&g_b.mapv(|v| v * config.lambda_cr)));
            gan.g_st.backward(&g_img);
            h.zero_grad();
        }
    }

    Ok(GeneratorStepOutput {
        losses,
        fake_t,
        fake_s,
    })
}

/// Squared distance between two soft-output batches: summed over output
/// dimensions (or averaged with `mean_over_dims`), averaged over the batch.
/// Returns the loss and its gradient w.r.t. `b`.
pub fn cr_from_outputs(
    a: &Array2<f64>,
    b: &Array2<f64>,
    mean_over_dims: bool,
) -> (f64, Array2<f64>) {
    assert_eq!(a.dim(), b.dim(), "consistency outputs differ in shape");
    let (n, c) = a.dim();
    if n == 0 {
        return (0.0, Array2::zeros((0, c)));
    }
    let mut scale = 1.0 / n as f64;
    if mean_over_dims {
        scale /= c as f64;
    }
    let diff = a - b;
    let loss = diff.mapv(|v| v * v).sum() * scale;
    let grad = diff.mapv(|v| -2.0 * v * scale);
    (loss, grad)
}

/// Consistency term between a frozen base generator and a newer pool member.
/// `new_gen_index` is the 1-based pool index of `new_gen`; the base generator
/// (index 1) has no predecessor, so indices below 2 are rejected.
#[allow(clippy::too_many_arguments)]
pub fn cr_loss(
    xs: &Batch,
    base_gen: &mut Net,
    new_gen: &mut Net,
    new_gen_index: usize,
    aug: &AugmentationSpec,
    inference: &mut Net,
    mean_over_dims: bool,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if new_gen_index < 2 {
        return Err(Error::Invalid(format!(
            "consistency term undefined for generator {new_gen_index}; it needs a trained predecessor"
        )));
    }
    let a = probs_matrix(&inference.forward(&base_gen.forward(xs, false), false));
    let aug_x = aug.apply_batch(xs, rng);
    let b = probs_matrix(&inference.forward(&new_gen.forward(&aug_x, false), false));
    Ok(cr_from_outputs(&a, &b, mean_over_dims).0)
}

/// Evaluates the cycle-consistent objective's components without touching
/// any gradients.
pub fn cyclegan_loss(
    xs: &Batch,
    xt: &Batch,
    gan: &mut CycleGan,
    config: &GanConfig,
) -> Result<GanStepLosses> {
    Ok(generator_step(gan, None, xs, xt, None, config, false)?.losses)
}

fn discriminator_update(d: &mut Net, real: &Batch, fake: &Batch, opt: &mut Adam) -> f64 {
    d.zero_grad();
    let (loss_real, g) = mse_to_const(&d.forward(real, true), 1.0);
    d.backward(&g.mapv(|v| v * 0.5));
    let (loss_fake, g) = mse_to_const(&d.forward(fake, true), 0.0);
    d.backward(&g.mapv(|v| v * 0.5));
    opt.step(&mut d.param_refs());
    0.5 * (loss_real + loss_fake)
}

/// Epoch-mean losses for one generator's training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanTrainEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub adv_st: f64,
    pub adv_ts: f64,
    pub cycle: f64,
    pub identity: f64,
    pub cr: f64,
    pub d_t: f64,
    pub d_s: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GanTrainReport {
    pub per_generator: Vec<Vec<GanTrainEpoch>>,
}

/// Trained pool: checkpoints live on disk, named `gen{k}_epoch{e}.json` with
/// `e` counting completed epochs from 1.
#[derive(Debug, Serialize, Deserialize)]
pub struct GeneratorPool {
    pub config: GanConfig,
    /// `checkpoints[k-1]` lists the saved epoch numbers of generator k.
    pub checkpoints: Vec<Vec<usize>>,
    #[serde(skip)]
    dir: PathBuf,
}

impl GeneratorPool {
    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn checkpoint_path(&self, k: usize, epoch: usize) -> PathBuf {
        self.dir.join(format!("gen{k}_epoch{epoch}.json"))
    }

    pub fn save(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.dir.join("pool.json");
        std::fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<GeneratorPool> {
        let path = dir.join("pool.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut pool: GeneratorPool = serde_json::from_slice(&bytes)?;
        pool.dir = dir.to_path_buf();
        Ok(pool)
    }

    pub fn available_epochs(&self, k: usize) -> &[usize] {
        self.checkpoints
            .get(k - 1)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn load_generator(&self, k: usize, epoch: usize) -> Result<Net> {
        let available = self
            .checkpoints
            .get(k.wrapping_sub(1))
            .ok_or_else(|| Error::Invalid(format!("no generator {k} in a pool of {}", self.checkpoints.len())))?;
        if !available.contains(&epoch) {
            return Err(Error::MissingCheckpoint {
                requested: epoch,
                available: available.clone(),
            });
        }
        let path = self.checkpoint_path(k, epoch);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let saved: SavedNet = serde_json::from_slice(&bytes)?;
        Net::from_saved(&saved)
    }
}

/// Stacks equally sized images into one batch.
pub fn batch_from_images<'a>(images: impl IntoIterator<Item = &'a RgbArray>) -> Result<Batch> {
    let images: Vec<&RgbArray> = images.into_iter().collect();
    let Some(first) = images.first() else {
        return Err(Error::Invalid("empty batch".into()));
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
        out.index_axis_mut(Axis(0), i).assign(*img);
    }
    Ok(out)
}

fn image_from_batch(batch: &Batch, i: usize) -> RgbArray {
    batch
        .index_axis(Axis(0), i)
        .to_owned()
        .mapv(|v| v.clamp(0.0, 1.0))
}

/// Trains the full pool sequentially; each generator gets a fresh
/// cycle-consistent model, and generators k >= 2 add the consistency term
/// against a base generator resampled per batch from those already trained.
pub fn train_generator_pool(
    source: &[RgbArray],
    target: &[RgbArray],
    mut inference: Option<&mut Net>,
    config: &GanConfig,
    dir: &Path,
) -> Result<(GeneratorPool, GanTrainReport)> {
    config.validate()?;
    if source.is_empty() {
        return Err(Error::Invalid("source domain set is empty".into()));
    }
    if target.is_empty() {
        return Err(Error::Invalid("target domain set is empty".into()));
    }
    if config.pool_size >= 2 && config.lambda_cr > 0.0 && inference.is_none() {
        return Err(Error::Config(
            "pool training with a nonzero consistency weight needs a trained inference model".into(),
        ));
    }
    for img in source.iter().chain(target) {
        let (_, h, w) = img.dim();
        if h != config.image_size || w != config.image_size {
            return Err(Error::Shape(format!(
                "image is {h}x{w} but the config expects {0}x{0}",
                config.image_size
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut pool = GeneratorPool {
        config: config.clone(),
        checkpoints: Vec::new(),
        dir: dir.to_path_buf(),
    };
    let mut report = GanTrainReport::default();
    let mut finals: Vec<SavedNet> = Vec::new();
    for k in 1..=config.pool_size {
        let (gan, log, saved) =
            train_single(k, source, target, &finals, inference.as_deref_mut(), config, dir)?;
        finals.push(gan.g_st.to_saved());
        pool.checkpoints.push(saved);
        report.per_generator.push(log);
    }
    pool.save()?;
    Ok((pool, report))
}

fn train_single(
    k: usize,
    source: &[RgbArray],
    target: &[RgbArray],
    prior: &[SavedNet],
    mut inference: Option<&mut Net>,
    config: &GanConfig,
    dir: &Path,
) -> Result<(CycleGan, Vec<GanTrainEpoch>, Vec<usize>)> {
    let mut rng = rng_for(config.seed, &format!("gan/gen{k}/init"));
    let mut gan = CycleGan::new(&mut rng);
    let mut prior_nets = prior
        .iter()
        .map(Net::from_saved)
        .collect::<Result<Vec<_>>>()?;
    let use_cr = k >= 2 && !prior_nets.is_empty() && inference.is_some();

    let (b1, b2) = config.betas;
    let mut opt_gst = Adam::new(config.base_lr, b1, b2);
    let mut opt_gts = Adam::new(config.base_lr, b1, b2);
    let mut opt_dt = Adam::new(config.base_lr, b1, b2);
    let mut opt_ds = Adam::new(config.base_lr, b1, b2);

    let steps = source.len().max(target.len()).div_ceil(config.batch_size);
    let mut log = Vec::with_capacity(config.total_epochs);
    let mut saved = Vec::new();

    for epoch in 0..config.total_epochs {
        let lr = lr_at_epoch(epoch, config)?;
        opt_gst.set_lr(lr);
        opt_gts.set_lr(lr);
        opt_dt.set_lr(lr);
        opt_ds.set_lr(lr);

        let mut erng = rng_for(config.seed, &format!("gan/gen{k}/epoch{epoch}"));
        let s_ord = shuffled_indices(source.len(), &mut erng);
        let t_ord = shuffled_indices(target.len(), &mut erng);

        let mut sums = GanStepLosses::default();
        let mut d_t_sum = 0.0;
        let mut d_s_sum = 0.0;
        for step in 0..steps {
            let xs = gather_batch(source, &s_ord, step, config.batch_size)?;
            let xt = gather_batch(target, &t_ord, step, config.batch_size)?;

            let cr_data = if use_cr {
                let r = erng.random_range(0..prior_nets.len());
                let base_out = prior_nets[r].forward(&xs, false);
                let aug_src = config.augmentation.apply_batch(&xs, &mut erng);
                Some((base_out, aug_src))
            } else {
                None
            };

            gan.g_st.zero_grad();
            gan.g_ts.zero_grad();
            let out = generator_step(
                &mut gan,
                inference.as_deref_mut(),
                &xs,
                &xt,
                cr_data.as_ref().map(|(base, aug)| CrInputs {
                    base_out: base,
                    aug_src: aug,
                }),
                config,
                true,
            )?;
            if !out.losses.is_finite() {
                return Err(Error::StageFailed {
                    stage: "gan".into(),
                    message: format!(
                        "non-finite generator loss at generator {k}, epoch {epoch}, step {step}"
                    ),
                });
            }
            opt_gst.step(&mut gan.g_st.param_refs());
            opt_gts.step(&mut gan.g_ts.param_refs());

            let d_t = discriminator_update(&mut gan.d_t, &xt, &out.fake_t, &mut opt_dt);
            let d_s = discriminator_update(&mut gan.d_s, &xs, &out.fake_s, &mut opt_ds);
            if !(d_t.is_finite() && d_s.is_finite()) {
                return Err(Error::StageFailed {
                    stage: "gan".into(),
                    message: format!(
                        "non-finite discriminator loss at generator {k}, epoch {epoch}, step {step}"
                    ),
                });
            }

            sums.adv_st += out.losses.adv_st;
            sums.adv_ts += out.losses.adv_ts;
            sums.cycle += out.losses.cycle;
            sums.identity += out.losses.identity;
            sums.cr += out.losses.cr;
            d_t_sum += d_t;
            d_s_sum += d_s;
        }

        let n = steps as f64;
        log.push(GanTrainEpoch {
            epoch,
            lr,
            adv_st: sums.adv_st / n,
            adv_ts: sums.adv_ts / n,
            cycle: sums.cycle / n,
            identity: sums.identity / n,
            cr: sums.cr / n,
            d_t: d_t_sum / n,
            d_s: d_s_sum / n,
        });

        let completed = epoch + 1;
        if completed % config.checkpoint_every == 0 || completed == config.total_epochs {
            let path = dir.join(format!("gen{k}_epoch{completed}.json"));
            if !path.exists() {
                std::fs::write(&path, serde_json::to_vec(&gan.g_st.to_saved())?)
                    .map_err(|e| Error::io(&path, e))?;
            }
            saved.push(completed);
        }
    }
    // keep the borrow checker happy: prior nets only live for this call
    prior_nets.clear();
    Ok((gan, log, saved))
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

fn gather_batch(
    images: &[RgbArray],
    order: &[usize],
    step: usize,
    batch: usize,
) -> Result<Batch> {
    let picks: Vec<&RgbArray> = (0..batch)
        .map(|j| &images[order[(step * batch + j) % order.len()]])
        .collect();
    batch_from_images(picks)
}

/// One translated image with full provenance.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub id: String,
    pub source_id: String,
    pub generator: usize,
    pub epoch: usize,
    pub image: RgbArray,
}

/// Maps source images through checkpointed generators. With `per_generator`
/// every generator translates every source; otherwise sources round-robin
/// over the pool. Fully deterministic, so regeneration is bit-identical.
pub fn generate_samples(
    pool: &GeneratorPool,
    sources: &[(String, RgbArray)],
    epoch: usize,
    per_generator: bool,
) -> Result<Vec<GeneratedSample>> {
    let kk = pool.config.pool_size;
    let mut out = Vec::new();
    for k in 1..=kk {
        let mut net = pool.load_generator(k, epoch)?;
        for (i, (sid, img)) in sources.iter().enumerate() {
            if !per_generator && i % kk != k - 1 {
                continue;
            }
            let x = batch_from_images([img])?;
            let y = net.forward(&x, false);
            out.push(GeneratedSample {
                id: format!("{sid}-g{k}e{epoch}"),
                source_id: sid.clone(),
                generator: k,
                epoch,
                image: image_from_batch(&y, 0),
            });
        }
    }
    Ok(out)
}
