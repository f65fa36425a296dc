//! Progressively growing conditional GAN.
//!
//! Generator and discriminator start at the lowest resolution and gain one
//! mirrored block per stage. A new block is faded in by blending its output
//! with the upsampled (generator) or downsampled (discriminator) path of the
//! previous stage. The generator reads the class from the one-hot tail of
//! its latent; the discriminator adds a projection of its features onto a
//! class embedding to an unconditional head.
//!
//! The Wasserstein gradient penalty needs `dD/dx` inside the loss. The
//! discriminator records the linear maps of its forward pass on a tape, and
//! the input gradient is rebuilt from forward ops (transposed convolutions,
//! fixed activation masks), so its dependence on the weights is ordinary
//! first-order autograd.

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::Optimizer;
use log::info;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::classes::{ClassCondition, NUM_CLASSES};
use crate::error::{ConfigIssue, Error, Result};
use crate::image_io::{batch_tensor, images_from_tensor, GrayImage};
use crate::nn::{
    adam, avg_pool2x, conv2d_im2col, finite_scalar, ids_tensor, leaky_relu, shuffled_batches, upsample2x,
    Builder, Checkpoint, Conv2d, Embedding, Linear, ParamStore,
};
use crate::seeds::{derive_seed, rng_from_seed};

pub const CHECKPOINT_KIND: &str = "gan";
pub const SECTION: &str = "gan";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrowthSchedule {
    pub start_resolution: usize,
    pub target_resolution: usize,
    pub epochs_per_stage: usize,
    /// Share of each stage (after the first) spent blending in the new block.
    pub fade_fraction: f64,
}

impl Default for GrowthSchedule {
    fn default() -> Self {
        Self {
            start_resolution: 4,
            target_resolution: 32,
            epochs_per_stage: 10,
            fade_fraction: 0.5,
        }
    }
}

impl GrowthSchedule {
    pub fn reference() -> Self {
        Self {
            start_resolution: 4,
            target_resolution: 256,
            epochs_per_stage: 100,
            fade_fraction: 0.5,
        }
    }

    pub fn issues(&self, prefix: &str) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let f = |n: &str| format!("{prefix}.{n}");
        if self.start_resolution == 0 {
            out.push(ConfigIssue::new(f("start_resolution"), "must be positive"));
        } else if self.target_resolution < self.start_resolution
            || self.target_resolution % self.start_resolution != 0
            || !(self.target_resolution / self.start_resolution).is_power_of_two()
        {
            out.push(ConfigIssue::new(
                f("target_resolution"),
                format!(
                    "{} is not a power-of-two multiple of start resolution {}",
                    self.target_resolution, self.start_resolution
                ),
            ));
        }
        if self.epochs_per_stage == 0 {
            out.push(ConfigIssue::new(f("epochs_per_stage"), "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.fade_fraction) {
            out.push(ConfigIssue::new(f("fade_fraction"), "must lie in [0, 1]"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues("gan.growth");
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    pub fn stages(&self) -> Vec<usize> {
        let mut out = vec![self.start_resolution];
        while *out.last().expect("non-empty") < self.target_resolution {
            out.push(out.last().expect("non-empty") * 2);
        }
        out
    }
}

/// Blend weight of a new block at `progress` in `[0, 1]` through its stage.
pub fn fade_weight(progress: f64, fade_fraction: f64) -> f64 {
    if fade_fraction <= 0.0 {
        1.0
    } else {
        (progress / fade_fraction).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub growth: GrowthSchedule,
    pub latent_dim: usize,
    /// Channel width at the lowest resolution; halves per stage down to
    /// `min_channels`.
    pub max_channels: usize,
    pub min_channels: usize,
    pub feature_dim: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub lambda_gp: f64,
    pub lrelu_slope: f64,
    /// Weight of the `D(real)^2` drift term that keeps critic scores bounded.
    pub drift_weight: f64,
    pub batch_size: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl GanConfig {
    pub fn toy() -> Self {
        Self {
            growth: GrowthSchedule::default(),
            latent_dim: 256,
            max_channels: 64,
            min_channels: 16,
            feature_dim: 64,
            learning_rate: 1e-3,
            adam_beta1: 0.0,
            adam_beta2: 0.99,
            lambda_gp: 10.0,
            lrelu_slope: 0.2,
            drift_weight: 1e-3,
            batch_size: 32,
        }
    }

    pub fn reference() -> Self {
        Self {
            growth: GrowthSchedule::reference(),
            max_channels: 512,
            feature_dim: 512,
            batch_size: 16,
            ..Self::toy()
        }
    }

    pub fn noise_dim(&self) -> usize {
        self.latent_dim.saturating_sub(NUM_CLASSES)
    }

    pub fn channels(&self) -> Vec<usize> {
        (0..self.growth.stages().len())
            .map(|k| (self.max_channels >> k).max(self.min_channels))
            .collect()
    }

    pub fn issues(&self, prefix: &str) -> Vec<ConfigIssue> {
        let mut out = self.growth.issues(&format!("{prefix}.growth"));
        let f = |n: &str| format!("{prefix}.{n}");
        if self.latent_dim <= NUM_CLASSES {
            out.push(ConfigIssue::new(
                f("latent_dim"),
                format!("must exceed the {NUM_CLASSES} conditioning entries"),
            ));
        }
        for (name, v) in [
            ("max_channels", self.max_channels),
            ("min_channels", self.min_channels),
            ("feature_dim", self.feature_dim),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                out.push(ConfigIssue::new(f(name), "must be positive"));
            }
        }
        if !(self.learning_rate > 0.0) {
            out.push(ConfigIssue::new(f("learning_rate"), "must be positive"));
        }
        if !(self.lambda_gp >= 0.0) {
            out.push(ConfigIssue::new(f("lambda_gp"), "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.lrelu_slope) {
            out.push(ConfigIssue::new(f("lrelu_slope"), "must lie in [0, 1)"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues("gan");
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }
}

/// Latent vector: unit Gaussian noise followed by the class one-hot.
pub fn conditional_latent(noise_dim: usize, condition: ClassCondition, rng: &mut impl Rng) -> Vec<f32> {
    let mut z: Vec<f32> = (0..noise_dim)
        .map(|_| {
            let v: f32 = StandardNormal.sample(rng);
            v
        })
        .collect();
    z.extend(condition.one_hot());
    z
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanLosses {
    pub discriminator: f64,
    pub generator: f64,
    pub penalty: f64,
}

/// `D = mean(fake) - mean(real) + lambda * mean((|g| - 1)^2)`, `G = -mean(fake)`.
pub fn wgan_gp_loss(real: &[f64], fake: &[f64], gradnorms: &[f64], lambda_gp: f64) -> Result<GanLosses> {
    if real.is_empty() || fake.is_empty() || gradnorms.is_empty() {
        return Err(Error::Input("score and gradient-norm lists must be non-empty".into()));
    }
    if gradnorms.iter().any(|g| !(*g >= 0.0)) {
        return Err(Error::Input("gradient norms must be non-negative".into()));
    }
    if !(lambda_gp >= 0.0) {
        return Err(Error::Input("lambda_gp must be non-negative".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let penalty = gradnorms.iter().map(|g| (g - 1.0).powi(2)).sum::<f64>() / gradnorms.len() as f64;
    let fake_mean = mean(fake);
    Ok(GanLosses {
        discriminator: fake_mean - mean(real) + lambda_gp * penalty,
        generator: -fake_mean,
        penalty,
    })
}

/// Tensor form of [`wgan_gp_loss`]: `(d_loss, g_loss)` from 1-d tensors.
pub fn wgan_gp_loss_tensor(real: &Tensor, fake: &Tensor, gradnorms: &Tensor, lambda_gp: f64) -> Result<(Tensor, Tensor)> {
    let penalty = (gradnorms - 1.0)?.sqr()?.mean_all()?;
    let fake_mean = fake.mean_all()?;
    let d = ((&fake_mean - real.mean_all()?)? + (penalty * lambda_gp)?)?;
    Ok((d, fake_mean.neg()?))
}

/// `head + <features, class_embedding>`.
pub fn projection_logit(features: &[f64], class_embedding: &[f64], head: f64) -> Result<f64> {
    if features.len() != class_embedding.len() {
        return Err(Error::Input(format!(
            "feature dimension {} differs from embedding dimension {}",
            features.len(),
            class_embedding.len()
        )));
    }
    Ok(head + features.iter().zip(class_embedding).map(|(a, b)| a * b).sum::<f64>())
}

/// One linear map of the discriminator's forward pass, for the
/// input-gradient rebuild.
enum TapeStep {
    /// Stride-1 convolution with "same" padding.
    Conv { weight: Tensor, padding: usize },
    /// Elementwise multiplication by a fixed activation slope mask.
    Mask(Tensor),
    Pool,
    Dense { weight: Tensor },
    Reshape(Vec<usize>),
    Fade { alpha: f64, main: Vec<TapeStep>, skip: Vec<TapeStep> },
}

/// Kernel of the adjoint of a stride-1 convolution.
fn adjoint_kernel(w: &Tensor) -> Result<Tensor> {
    let k = w.dim(2)?;
    let rev = ids_tensor(&(0..k).rev().collect::<Vec<_>>(), w.device())?;
    Ok(w.transpose(0, 1)?.contiguous()?.index_select(&rev, 2)?.index_select(&rev, 3)?)
}

fn pullback(tape: &[TapeStep], mut g: Tensor) -> Result<Tensor> {
    for step in tape.iter().rev() {
        g = match step {
            TapeStep::Conv { weight, padding } => conv2d_im2col(&g, &adjoint_kernel(weight)?, *padding, 1)?,
            TapeStep::Mask(m) => (g * m)?,
            TapeStep::Pool => (upsample2x(&g)? * 0.25)?,
            TapeStep::Dense { weight } => g.matmul(weight)?,
            TapeStep::Reshape(shape) => g.reshape(shape.as_slice())?,
            TapeStep::Fade { alpha, main, skip } => {
                ((pullback(main, g.clone())? * *alpha)? + (pullback(skip, g)? * (1.0 - alpha))?)?
            }
        };
    }
    Ok(g)
}

struct Recorder {
    steps: Option<Vec<TapeStep>>,
    slope: f64,
}

impl Recorder {
    fn new(record: bool, slope: f64) -> Self {
        Self {
            steps: record.then(Vec::new),
            slope,
        }
    }

    fn conv(&mut self, conv: &Conv2d, x: &Tensor) -> Result<Tensor> {
        if let Some(s) = &mut self.steps {
            s.push(TapeStep::Conv {
                weight: conv.weight.clone(),
                padding: conv.padding,
            });
        }
        Ok(conv.forward(x)?)
    }

    fn lrelu(&mut self, x: &Tensor) -> Result<Tensor> {
        if let Some(s) = &mut self.steps {
            let mask = ((x.ge(0f32)?.to_dtype(DType::F32)? * (1.0 - self.slope))? + self.slope)?.detach();
            s.push(TapeStep::Mask(mask));
        }
        Ok(leaky_relu(x, self.slope)?)
    }

    fn pool(&mut self, x: &Tensor) -> Result<Tensor> {
        if let Some(s) = &mut self.steps {
            s.push(TapeStep::Pool);
        }
        Ok(avg_pool2x(x)?)
    }

    fn dense(&mut self, layer: &Linear, x: &Tensor) -> Result<Tensor> {
        if let Some(s) = &mut self.steps {
            s.push(TapeStep::Dense {
                weight: layer.weight.clone(),
            });
        }
        Ok(layer.forward(x)?)
    }

    fn flatten(&mut self, x: &Tensor) -> Result<Tensor> {
        if let Some(s) = &mut self.steps {
            s.push(TapeStep::Reshape(x.dims().to_vec()));
        }
        Ok(x.flatten_from(1)?)
    }
}

#[derive(Debug, Clone)]
struct Generator {
    input: Linear,
    init_conv: Conv2d,
    blocks: Vec<Conv2d>,
    to_image: Vec<Conv2d>,
    base_channels: usize,
    start: usize,
    slope: f64,
}

impl Generator {
    fn new(b: &Builder, cfg: &GanConfig) -> Result<Self> {
        let ch = cfg.channels();
        let start = cfg.growth.start_resolution;
        let mut blocks = Vec::new();
        let mut to_image = Vec::new();
        for k in 0..ch.len() {
            if k > 0 {
                blocks.push(Conv2d::new(&b.pp(format!("block{k}")), ch[k - 1], ch[k], 3, 1, 1)?);
            }
            to_image.push(Conv2d::new(&b.pp(format!("to_image{k}")), ch[k], 1, 1, 0, 1)?);
        }
        Ok(Self {
            input: Linear::new(&b.pp("input"), cfg.latent_dim, ch[0] * start * start)?,
            init_conv: Conv2d::new(&b.pp("init_conv"), ch[0], ch[0], 3, 1, 1)?,
            blocks,
            to_image,
            base_channels: ch[0],
            start,
            slope: cfg.lrelu_slope,
        })
    }

    /// Output at the resolution of `stage`, in `[-1, 1]` scale (unclamped).
    fn forward(&self, z: &Tensor, stage: usize, alpha: f64) -> Result<Tensor> {
        let b = z.dim(0)?;
        let h = leaky_relu(&self.input.forward(z)?, self.slope)?;
        let mut h = h.reshape((b, self.base_channels, self.start, self.start))?;
        h = leaky_relu(&self.init_conv.forward(&h)?, self.slope)?;
        let mut prev = None;
        for k in 1..=stage {
            if k == stage {
                prev = Some(h.clone());
            }
            h = leaky_relu(&self.blocks[k - 1].forward(&upsample2x(&h)?)?, self.slope)?;
        }
        let out = self.to_image[stage].forward(&h)?;
        match prev {
            Some(p) if alpha < 1.0 => {
                let old = upsample2x(&self.to_image[stage - 1].forward(&p)?)?;
                Ok(((out * alpha)? + (old * (1.0 - alpha))?)?)
            }
            _ => Ok(out),
        }
    }
}

#[derive(Debug, Clone)]
struct Discriminator {
    from_image: Vec<Conv2d>,
    blocks: Vec<Conv2d>,
    final_conv: Conv2d,
    dense: Linear,
    head: Linear,
    class_embedding: Embedding,
    slope: f64,
}

impl Discriminator {
    fn new(b: &Builder, cfg: &GanConfig) -> Result<Self> {
        let ch = cfg.channels();
        let start = cfg.growth.start_resolution;
        let mut from_image = Vec::new();
        let mut blocks = Vec::new();
        for k in 0..ch.len() {
            from_image.push(Conv2d::new(&b.pp(format!("from_image{k}")), 1, ch[k], 1, 0, 1)?);
            if k > 0 {
                blocks.push(Conv2d::new(&b.pp(format!("block{k}")), ch[k], ch[k - 1], 3, 1, 1)?);
            }
        }
        Ok(Self {
            from_image,
            blocks,
            final_conv: Conv2d::new(&b.pp("final_conv"), ch[0], ch[0], 3, 1, 1)?,
            dense: Linear::new(&b.pp("dense"), ch[0] * start * start, cfg.feature_dim)?,
            head: Linear::new(&b.pp("head"), cfg.feature_dim, 1)?,
            class_embedding: Embedding::new(&b.pp("class_embedding"), NUM_CLASSES, cfg.feature_dim)?,
            slope: cfg.lrelu_slope,
        })
    }

    /// Scores `(B,)` and, when `record`, the tape from input to features.
    fn forward(
        &self,
        x: &Tensor,
        classes: &[usize],
        stage: usize,
        alpha: f64,
        record: bool,
    ) -> Result<(Tensor, Option<Vec<TapeStep>>)> {
        let mut rec = Recorder::new(record, self.slope);
        let mut h = if stage > 0 && alpha < 1.0 {
            let mut main = Recorder::new(record, self.slope);
            let a = main.conv(&self.from_image[stage], x)?;
            let a = main.lrelu(&a)?;
            let a = main.conv(&self.blocks[stage - 1], &a)?;
            let a = main.lrelu(&a)?;
            let a = main.pool(&a)?;
            let mut skip = Recorder::new(record, self.slope);
            let s = skip.pool(x)?;
            let s = skip.conv(&self.from_image[stage - 1], &s)?;
            let s = skip.lrelu(&s)?;
            if let (Some(steps), Some(main), Some(skip)) = (&mut rec.steps, main.steps, skip.steps) {
                steps.push(TapeStep::Fade { alpha, main, skip });
            }
            ((a * alpha)? + (s * (1.0 - alpha))?)?
        } else {
            let h = rec.conv(&self.from_image[stage], x)?;
            let h = rec.lrelu(&h)?;
            if stage > 0 {
                let h = rec.conv(&self.blocks[stage - 1], &h)?;
                let h = rec.lrelu(&h)?;
                rec.pool(&h)?
            } else {
                h
            }
        };
        for k in (1..stage).rev() {
            h = rec.conv(&self.blocks[k - 1], &h)?;
            h = rec.lrelu(&h)?;
            h = rec.pool(&h)?;
        }
        h = rec.conv(&self.final_conv, &h)?;
        h = rec.lrelu(&h)?;
        h = rec.flatten(&h)?;
        h = rec.dense(&self.dense, &h)?;
        let features = rec.lrelu(&h)?;
        let emb = self.class_embedding.forward(&ids_tensor(classes, x.device())?)?;
        let score = (self.head.forward(&features)?.squeeze(1)? + (&features * &emb)?.sum(1)?)?;
        Ok((score, rec.steps))
    }

    /// Per-sample `|dD/dx|` as a differentiable function of the weights.
    fn input_gradient_norms(&self, x: &Tensor, classes: &[usize], stage: usize, alpha: f64) -> Result<Tensor> {
        let (_, tape) = self.forward(x, classes, stage, alpha, true)?;
        let tape = tape.expect("recorded");
        // d score / d features = head weight + class embedding row
        let emb = self.class_embedding.forward(&ids_tensor(classes, x.device())?)?;
        let seed = emb.broadcast_add(&self.head.weight)?;
        let g = pullback(&tape, seed)?;
        Ok((g.sqr()?.flatten_from(1)?.sum(D::Minus1)? + 1e-12)?.sqrt()?)
    }
}

/// Generator and discriminator with their growth state.
#[derive(Debug)]
pub struct Pggan {
    pub config: GanConfig,
    /// Index of the active stage in `config.growth.stages()`.
    pub stage: usize,
    store: ParamStore,
    generator: Generator,
    discriminator: Discriminator,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SectionMeta {
    config: GanConfig,
    stage: usize,
}

impl Pggan {
    pub fn new(config: &GanConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed);
        let generator = Generator::new(&store.root().pp("gen"), config)?;
        let discriminator = Discriminator::new(&store.root().pp("disc"), config)?;
        Ok(Self {
            config: config.clone(),
            stage: 0,
            store,
            generator,
            discriminator,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn resolution(&self) -> usize {
        self.config.growth.stages()[self.stage]
    }

    pub fn num_stages(&self) -> usize {
        self.config.growth.stages().len()
    }

    fn latents(&self, conditions: &[ClassCondition], seeds: &[u64]) -> Result<Tensor> {
        let n = self.config.latent_dim;
        let mut data = Vec::with_capacity(conditions.len() * n);
        for (c, &s) in conditions.iter().zip(seeds) {
            data.extend(conditional_latent(self.config.noise_dim(), *c, &mut rng_from_seed(s)));
        }
        Ok(Tensor::from_vec(data, (conditions.len(), n), &Device::Cpu)?)
    }

    /// Generator output at the active stage with fade weight `alpha`,
    /// mapped to `[0, 1]`.
    pub fn generate_at(&self, conditions: &[ClassCondition], seeds: &[u64], alpha: f64) -> Result<Vec<GrayImage>> {
        if conditions.len() != seeds.len() {
            return Err(Error::Input("one seed per condition required".into()));
        }
        if conditions.is_empty() {
            return Ok(Vec::new());
        }
        let z = self.latents(conditions, seeds)?;
        let out = self.generator.forward(&z, self.stage, alpha)?;
        images_from_tensor(&((out + 1.0)? * 0.5)?)
    }

    pub fn sample_images(&self, conditions: &[ClassCondition], seeds: &[u64]) -> Result<Vec<GrayImage>> {
        if self.stage + 1 != self.num_stages() {
            return Err(Error::State(format!(
                "generator is at {}x{}, not the target resolution",
                self.resolution(),
                self.resolution()
            )));
        }
        let mut out = Vec::with_capacity(conditions.len());
        for start in (0..conditions.len()).step_by(64) {
            let end = (start + 64).min(conditions.len());
            out.extend(self.generate_at(&conditions[start..end], &seeds[start..end], 1.0)?);
        }
        Ok(out)
    }

    pub fn sample_gan(&self, condition: ClassCondition, seed: u64) -> Result<GrayImage> {
        Ok(self.sample_images(&[condition], &[seed])?.remove(0))
    }

    /// Critic scores for images in `[0, 1]` at the active stage.
    pub fn critic(&self, images: &[&GrayImage], classes: &[usize], alpha: f64) -> Result<Vec<f32>> {
        let x = ((batch_tensor(images, &Device::Cpu)? * 2.0)? - 1.0)?;
        Ok(self.discriminator.forward(&x, classes, self.stage, alpha, false)?.0.to_vec1()?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND);
        ck.add_section(
            SECTION,
            &SectionMeta {
                config: self.config.clone(),
                stage: self.stage,
            },
            &self.store,
        )?;
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load_kind(path, CHECKPOINT_KIND)?;
        let meta: SectionMeta = ck.section_meta(SECTION)?;
        let mut g = Self::new(&meta.config, 0)?;
        ck.load_into(SECTION, &g.store)?;
        g.stage = meta.stage;
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanEpoch {
    pub epoch: usize,
    /// Fade weight at the end of the epoch.
    pub alpha: f64,
    pub discriminator: f64,
    pub generator: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanStageHistory {
    pub resolution: usize,
    pub epochs: Vec<GanEpoch>,
}

pub struct TrainedGan {
    pub model: Pggan,
    pub history: Vec<GanStageHistory>,
}

/// Downsamples `[-1, 1]` images to every stage resolution, lowest first.
fn stage_pyramid(images: &[&GrayImage], stages: &[usize]) -> Result<Vec<Tensor>> {
    let full = ((batch_tensor(images, &Device::Cpu)? * 2.0)? - 1.0)?;
    let mut out = vec![full];
    while out.len() < stages.len() {
        let next = avg_pool2x(out.last().expect("non-empty"))?;
        out.push(next);
    }
    out.reverse();
    Ok(out)
}

/// Trains stage by stage: a fade-in phase for every stage after the first,
/// then stabilization, for `epochs_per_stage` epochs each.
pub fn train_pggan(images: &[&GrayImage], classes: &[usize], config: &GanConfig, seed: u64) -> Result<TrainedGan> {
    config.validate()?;
    if images.is_empty() || images.len() != classes.len() {
        return Err(Error::Input("need a non-empty image set with one class per image".into()));
    }
    if let Some(&bad) = classes.iter().find(|&&c| c >= NUM_CLASSES) {
        return Err(Error::Input(format!("class index {bad} out of range")));
    }
    let stages = config.growth.stages();
    let target = *stages.last().expect("non-empty");
    if images.iter().any(|i| i.size() != target) {
        return Err(Error::Input(format!("training images must be {target}x{target}")));
    }
    let mut model = Pggan::new(config, derive_seed(seed, "gan-init", 0))?;
    let pyramid = stage_pyramid(images, &stages)?;
    let mut g_opt = adam(model.store.trainable_under("gen."), config.learning_rate, config.adam_beta1, config.adam_beta2)?;
    let mut d_opt = adam(model.store.trainable_under("disc."), config.learning_rate, config.adam_beta1, config.adam_beta2)?;
    let mut rng = rng_from_seed(derive_seed(seed, "gan-batches", 0));
    let n = images.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let mut history = Vec::new();

    for (si, &res) in stages.iter().enumerate() {
        model.stage = si;
        let real_all = &pyramid[si];
        let total_steps = (config.growth.epochs_per_stage * steps_per_epoch) as f64;
        let mut step = 0usize;
        let mut epochs = Vec::new();
        for epoch in 0..config.growth.epochs_per_stage {
            let (mut sd, mut sg, mut sp) = (0.0, 0.0, 0.0);
            let mut alpha = 1.0;
            let batches = shuffled_batches(n, config.batch_size, &mut rng);
            for (bi, idx) in batches.iter().enumerate() {
                alpha = if si == 0 {
                    1.0
                } else {
                    fade_weight(step as f64 / total_steps, config.growth.fade_fraction)
                };
                let b = idx.len();
                let real = real_all.index_select(&ids_tensor(idx, &Device::Cpu)?, 0)?;
                let cls: Vec<usize> = idx.iter().map(|&i| classes[i]).collect();
                let conds: Vec<ClassCondition> = cls.iter().map(|&c| ClassCondition::new(c)).collect::<Result<_>>()?;
                let z_seeds: Vec<u64> = (0..b).map(|_| rng.random()).collect();
                let z = model.latents(&conds, &z_seeds)?;

                // critic step
                let fake = model.generator.forward(&z, si, alpha)?.detach();
                let (real_scores, _) = model.discriminator.forward(&real, &cls, si, alpha, false)?;
                let (fake_scores, _) = model.discriminator.forward(&fake, &cls, si, alpha, false)?;
                let eps: Vec<f32> = (0..b).map(|_| rng.random::<f32>()).collect();
                let eps = Tensor::from_vec(eps, (b, 1, 1, 1), &Device::Cpu)?;
                let mix = (real.broadcast_mul(&eps)? + fake.broadcast_mul(&(1.0 - eps)?)?)?.detach();
                let norms = model.discriminator.input_gradient_norms(&mix, &cls, si, alpha)?;
                let (d_loss, _) = wgan_gp_loss_tensor(&real_scores, &fake_scores, &norms, config.lambda_gp)?;
                let drift = (real_scores.sqr()?.mean_all()? * config.drift_weight)?;
                let d_total = (&d_loss + drift)?;
                sd += finite_scalar(&d_loss, &format!("gan stage {res}x{res} critic"), epoch, bi)?;
                sp += (norms.detach() - 1.0)?.sqr()?.mean_all()?.to_scalar::<f32>()? as f64;
                d_opt.backward_step(&d_total)?;

                // generator step
                let fake = model.generator.forward(&z, si, alpha)?;
                let (fake_scores, _) = model.discriminator.forward(&fake, &cls, si, alpha, false)?;
                let g_loss = fake_scores.mean_all()?.neg()?;
                sg += finite_scalar(&g_loss, &format!("gan stage {res}x{res} generator"), epoch, bi)?;
                let grads = g_loss.backward()?;
                g_opt.step(&grads)?;
                step += 1;
            }
            let nb = batches.len() as f64;
            info!(
                "gan {res}x{res} epoch {epoch}: D {:.4} G {:.4} gp {:.4} alpha {alpha:.2}",
                sd / nb,
                sg / nb,
                sp / nb
            );
            epochs.push(GanEpoch {
                epoch,
                alpha,
                discriminator: sd / nb,
                generator: sg / nb,
                penalty: sp / nb,
            });
        }
        history.push(GanStageHistory { resolution: res, epochs });
    }
    Ok(TrainedGan { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;

    fn tiny() -> GanConfig {
        GanConfig {
            growth: GrowthSchedule {
                start_resolution: 4,
                target_resolution: 16,
                epochs_per_stage: 1,
                fade_fraction: 0.5,
            },
            max_channels: 8,
            min_channels: 4,
            feature_dim: 6,
            batch_size: 4,
            ..GanConfig::toy()
        }
    }

    #[test]
    fn stage_lists() {
        assert_eq!(GrowthSchedule::reference().stages(), vec![4, 8, 16, 32, 64, 128, 256]);
        assert_eq!(GrowthSchedule::default().stages().len(), 4);
        let bad = GrowthSchedule {
            target_resolution: 48,
            ..GrowthSchedule::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert_eq!(GanConfig::reference().lrelu_slope, 0.2);
        assert_eq!(GanConfig::reference().lambda_gp, 10.0);
        assert_eq!(GanConfig::reference().noise_dim(), 241);
    }

    #[test]
    fn fade_weight_ramps_monotonically() {
        assert_eq!(fade_weight(0.0, 0.5), 0.0);
        assert_eq!(fade_weight(0.5, 0.5), 1.0);
        assert_eq!(fade_weight(1.0, 0.5), 1.0);
        assert_eq!(fade_weight(0.0, 0.0), 1.0);
        let w: Vec<f64> = (0..=20).map(|i| fade_weight(i as f64 / 20.0, 0.5)).collect();
        assert!(w.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn latent_tail_is_one_hot() {
        let z = conditional_latent(241, ClassCondition::new(3).unwrap(), &mut rng_from_seed(0));
        assert_eq!(z.len(), 256);
        let tail = &z[241..];
        assert_eq!(tail.iter().sum::<f32>(), 1.0);
        assert_eq!(tail[3], 1.0);
    }

    #[test]
    fn loss_fixtures() {
        let l = wgan_gp_loss(&[1.0], &[-1.0], &[1.0], 10.0).unwrap();
        assert_eq!(l.discriminator, -2.0);
        assert_eq!(l.generator, 1.0);
        assert_eq!(wgan_gp_loss(&[0.3], &[0.1], &[1.0, 1.0, 1.0], 10.0).unwrap().penalty, 0.0);
        assert!(wgan_gp_loss(&[1.0], &[1.0], &[-0.1], 10.0).is_err());
        assert_eq!(projection_logit(&[1.0, 2.0], &[0.5, 0.5], 0.0).unwrap(), 1.5);
        assert_eq!(projection_logit(&[1.0, 2.0], &[0.0, 0.0], 0.7).unwrap(), 0.7);
        assert!(projection_logit(&[1.0], &[1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn generator_output_tracks_stage_resolution() {
        let mut g = Pggan::new(&tiny(), 1).unwrap();
        let c = [ClassCondition::new(0).unwrap()];
        for stage in 0..3 {
            g.stage = stage;
            for alpha in [0.0, 0.5, 1.0] {
                assert_eq!(g.generate_at(&c, &[5], alpha).unwrap()[0].size(), 4 << stage);
            }
        }
        assert_eq!(g.sample_gan(c[0], 9).unwrap(), g.sample_gan(c[0], 9).unwrap());
        g.stage = 1;
        assert!(matches!(g.sample_gan(c[0], 9), Err(Error::State(_))));
    }

    /// Input gradients from the tape must equal autograd's, at every stage
    /// and through a fade.
    #[test]
    fn tape_gradient_matches_autograd() {
        let g = Pggan::new(&tiny(), 2).unwrap();
        let d = &g.discriminator;
        let classes = [1usize, 7, 14];
        for (stage, alpha) in [(0, 1.0), (1, 1.0), (2, 0.3), (2, 1.0)] {
            let res = 4 << stage;
            let mut r = rng_from_seed(stage as u64);
            let data: Vec<f32> = (0..3 * res * res).map(|_| r.random_range(-1.0..1.0)).collect();
            let x = Var::from_tensor(&Tensor::from_vec(data, (3, 1, res, res), &Device::Cpu).unwrap()).unwrap();
            let (score, _) = d.forward(x.as_tensor(), &classes, stage, alpha, false).unwrap();
            let grads = score.sum_all().unwrap().backward().unwrap();
            let auto = grads.get(&x).unwrap();
            let auto_norms: Vec<f32> = auto.sqr().unwrap().flatten_from(1).unwrap().sum(1).unwrap().sqrt().unwrap().to_vec1().unwrap();
            let tape_norms: Vec<f32> = d
                .input_gradient_norms(x.as_tensor(), &classes, stage, alpha)
                .unwrap()
                .to_vec1()
                .unwrap();
            for (a, t) in auto_norms.iter().zip(&tape_norms) {
                assert!((a - t).abs() < 1e-4 * a.max(1.0), "stage {stage}: {a} vs {t}");
            }
        }
    }

    /// The penalty's weight gradient against central differences.
    #[test]
    fn penalty_weight_gradient_matches_finite_differences() {
        let g = Pggan::new(&tiny(), 3).unwrap();
        let d = &g.discriminator;
        let classes = [2usize, 5];
        let mut r = rng_from_seed(11);
        let data: Vec<f32> = (0..2 * 64).map(|_| r.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(data, (2, 1, 8, 8), &Device::Cpu).unwrap();
        let penalty = || -> f64 {
            let n = d.input_gradient_norms(&x, &classes, 1, 0.6).unwrap();
            (n - 1.0).unwrap().sqr().unwrap().mean_all().unwrap().to_scalar::<f32>().unwrap() as f64
        };
        let vars = g.store.trainable_under("disc.block1.weight");
        assert_eq!(vars.len(), 1);
        let w = &vars[0];
        let n = d.input_gradient_norms(&x, &classes, 1, 0.6).unwrap();
        let grads = (n - 1.0).unwrap().sqr().unwrap().mean_all().unwrap().backward().unwrap();
        let analytic: Vec<f32> = grads.get(w).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let original = w.as_tensor().copy().unwrap();
        let flat: Vec<f32> = original.flatten_all().unwrap().to_vec1().unwrap();
        // small step: the Jacobian jumps wherever an activation mask flips
        let h = 1e-3f32;
        for i in [0usize, 7, 31, 100] {
            let mut plus = flat.clone();
            plus[i] += h;
            w.set(&Tensor::from_vec(plus, original.dims(), &Device::Cpu).unwrap()).unwrap();
            let fp = penalty();
            let mut minus = flat.clone();
            minus[i] -= h;
            w.set(&Tensor::from_vec(minus, original.dims(), &Device::Cpu).unwrap()).unwrap();
            let fm = penalty();
            w.set(&original).unwrap();
            let numeric = (fp - fm) / (2.0 * h as f64);
            let a = analytic[i] as f64;
            assert!(
                (numeric - a).abs() < 0.05 * a.abs().max(1e-2),
                "weight {i}: numeric {numeric} analytic {a}"
            );
        }
    }

    #[test]
    fn training_records_one_entry_per_stage() {
        let cfg = tiny();
        let imgs: Vec<GrayImage> = (0..8)
            .map(|i| GrayImage::new(16, vec![(i as f32) / 8.0; 256]).unwrap())
            .collect();
        let refs: Vec<&GrayImage> = imgs.iter().collect();
        let classes: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let out = train_pggan(&refs, &classes, &cfg, 0).unwrap();
        assert_eq!(out.history.len(), 3);
        assert_eq!(
            out.history.iter().map(|h| h.resolution).collect::<Vec<_>>(),
            vec![4, 8, 16]
        );
        assert_eq!(out.history[1].epochs[0].alpha, 1.0);
        let again = train_pggan(&refs, &classes, &cfg, 0).unwrap();
        assert_eq!(out.history, again.history);
    }
}
