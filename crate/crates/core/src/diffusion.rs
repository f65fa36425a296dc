//! Class-conditional denoising diffusion on autoencoder latents.
//!
//! The denoiser is a small U-Net that predicts the added noise. Time enters
//! every residual block through a sinusoidal embedding; the class enters
//! once, through cross-attention in the bottleneck against a row of a
//! learned 15-row lookup table.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::Optimizer;
use log::{info, warn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::classes::{class_name, ClassCondition, NUM_CLASSES};
use crate::error::{ConfigIssue, Error, Result};
use crate::image_io::GrayImage;
use crate::nn::blocks::{norm_groups, ResBlock};
use crate::nn::{
    adam, finite_scalar, ids_tensor, shuffled_batches, silu, upsample2x, Builder, Checkpoint, Conv2d, Embedding,
    GroupNorm, Linear, ParamStore,
};
use crate::seeds::{derive_seed, rng_from_seed};
use crate::vae::{Autoencoder, LatentGrid};

pub const CHECKPOINT_KIND: &str = "ldm";
pub const SECTION: &str = "ldm";
pub const LATENTS_KIND: &str = "latents";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub unet_channels: Vec<usize>,
    pub num_steps: usize,
    pub learning_rate: f64,
    /// Width of the class lookup table rows.
    pub embedding_dim: usize,
    pub schedule_kind: ScheduleKind,
    /// Endpoints of the linear schedule.
    pub beta_start: f64,
    pub beta_end: f64,
    pub attention_heads: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl DiffusionConfig {
    pub fn toy() -> Self {
        Self {
            unet_channels: vec![32, 64],
            num_steps: 100,
            learning_rate: 1e-3,
            embedding_dim: 32,
            schedule_kind: ScheduleKind::Cosine,
            beta_start: 1e-4,
            beta_end: 2e-2,
            attention_heads: 4,
            batch_size: 32,
            patience: 10,
        }
    }

    pub fn reference() -> Self {
        Self {
            unet_channels: vec![32, 128, 256],
            num_steps: 1000,
            learning_rate: 1e-6,
            embedding_dim: 512,
            schedule_kind: ScheduleKind::Linear,
            beta_start: 1e-4,
            beta_end: 2e-2,
            attention_heads: 4,
            batch_size: 16,
            patience: 10,
        }
    }

    pub fn issues(&self, prefix: &str) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let f = |n: &str| format!("{prefix}.{n}");
        if self.unet_channels.is_empty() || self.unet_channels.contains(&0) {
            out.push(ConfigIssue::new(f("unet_channels"), "must be a non-empty list of positive integers"));
        }
        if self.num_steps == 0 {
            out.push(ConfigIssue::new(f("num_steps"), "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            out.push(ConfigIssue::new(f("learning_rate"), "must be positive"));
        }
        if self.attention_heads == 0 {
            out.push(ConfigIssue::new(f("attention_heads"), "must be positive"));
        } else if let Some(&c) = self.unet_channels.last() {
            if c % self.attention_heads != 0 {
                out.push(ConfigIssue::new(
                    f("attention_heads"),
                    format!("bottleneck width {c} is not divisible by {} heads", self.attention_heads),
                ));
            }
        }
        for (name, v) in [
            ("embedding_dim", self.embedding_dim),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                out.push(ConfigIssue::new(f(name), "must be positive"));
            }
        }
        if self.schedule_kind == ScheduleKind::Linear
            && !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0)
        {
            out.push(ConfigIssue::new(
                f("beta_start"),
                "linear schedule needs 0 < beta_start <= beta_end < 1",
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues("ldm");
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }
}

pub fn make_schedule(config: &DiffusionConfig) -> Result<NoiseSchedule> {
    let n = config.num_steps;
    if n == 0 {
        return Err(Error::Config(vec![ConfigIssue::new("ldm.num_steps", "must be at least 1")]));
    }
    let betas: Vec<f64> = match config.schedule_kind {
        ScheduleKind::Linear => {
            if !(0.0 < config.beta_start && config.beta_start <= config.beta_end && config.beta_end < 1.0) {
                return Err(Error::Config(vec![ConfigIssue::new(
                    "ldm.beta_start",
                    "linear schedule needs 0 < beta_start <= beta_end < 1",
                )]));
            }
            (0..n)
                .map(|i| {
                    if n == 1 {
                        config.beta_start
                    } else {
                        config.beta_start + (config.beta_end - config.beta_start) * i as f64 / (n - 1) as f64
                    }
                })
                .collect()
        }
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| (((t / n as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (0..n)
                .map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).clamp(1e-8, 0.999))
                .collect()
        }
    };
    let mut alphas_cumprod = Vec::with_capacity(n);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alphas_cumprod.push(acc);
    }
    Ok(NoiseSchedule { betas, alphas_cumprod })
}

/// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise`, elementwise in f64.
pub fn forward_noise(x0: &[f64], t: usize, noise: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if t >= schedule.num_steps() {
        return Err(Error::Input(format!(
            "step {t} outside a {}-step schedule",
            schedule.num_steps()
        )));
    }
    if x0.len() != noise.len() {
        return Err(Error::Input("noise shape differs from latent shape".into()));
    }
    let ab = schedule.alphas_cumprod[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect())
}

/// [`forward_noise`] on latent grids.
pub fn forward_noise_grid(x0: &LatentGrid, t: usize, noise: &LatentGrid, schedule: &NoiseSchedule) -> Result<LatentGrid> {
    if (x0.channels, x0.size) != (noise.channels, noise.size) {
        return Err(Error::Input("noise shape differs from latent shape".into()));
    }
    let to64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let out = forward_noise(&to64(&x0.values), t, &to64(&noise.values), schedule)?;
    LatentGrid::new(x0.channels, x0.size, out.into_iter().map(|v| v as f32).collect())
}

/// Batched noising with a per-sample step.
fn q_sample(x0: &Tensor, steps: &[usize], noise: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let b = steps.len();
    let a: Vec<f32> = steps.iter().map(|&t| schedule.alphas_cumprod[t].sqrt() as f32).collect();
    let s: Vec<f32> = steps
        .iter()
        .map(|&t| (1.0 - schedule.alphas_cumprod[t]).sqrt() as f32)
        .collect();
    let dev = x0.device();
    let a = Tensor::from_vec(a, (b, 1, 1, 1), dev)?;
    let s = Tensor::from_vec(s, (b, 1, 1, 1), dev)?;
    Ok((x0.broadcast_mul(&a)? + noise.broadcast_mul(&s)?)?)
}

fn timestep_embedding(steps: &[usize], dim: usize, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        let mut row = vec![0f32; dim];
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            let arg = t as f64 * freq;
            row[i] = arg.sin() as f32;
            row[half + i] = arg.cos() as f32;
        }
        data.extend(row);
    }
    Ok(Tensor::from_vec(data, (steps.len(), dim), device)?)
}

/// Multi-head attention from spatial positions to context tokens.
#[derive(Debug, Clone)]
struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl CrossAttention {
    fn new(b: &Builder, channels: usize, context_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&b.pp("norm"), norm_groups(channels), channels)?,
            q: Linear::no_bias(&b.pp("q"), channels, channels)?,
            k: Linear::no_bias(&b.pp("k"), context_dim, channels)?,
            v: Linear::no_bias(&b.pp("v"), context_dim, channels)?,
            out: Linear::new(&b.pp("out"), channels, channels)?,
            heads,
        })
    }

    /// `x` is `(B, C, H, W)`, `context` is `(B, T, E)`.
    fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let t = context.dim(1)?;
        let d = c / self.heads;
        let tokens = self.norm.forward(x)?.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let split = |y: Tensor, n: usize| -> Result<Tensor> {
            Ok(y.reshape((b, n, self.heads, d))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(&tokens)?, h * w)?;
        let k = split(self.k.forward(context)?, t)?;
        let v = split(self.v.forward(context)?, t)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (d as f64).sqrt())?;
        let att = candle_nn::ops::softmax_last_dim(&scores)?;
        let o = att.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, h * w, c))?;
        let o = self.out.forward(&o)?.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?;
        Ok((x + o)?)
    }
}

#[derive(Debug, Clone)]
struct TimedBlock {
    block: ResBlock,
    time: Linear,
    out_channels: usize,
}

impl TimedBlock {
    fn new(b: &Builder, c_in: usize, c_out: usize, temb: usize) -> Result<Self> {
        Ok(Self {
            block: ResBlock::new(&b.pp("res"), c_in, c_out)?,
            time: Linear::new(&b.pp("time"), temb, c_out)?,
            out_channels: c_out,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let bsz = x.dim(0)?;
        let bias = self.time.forward(temb)?.reshape((bsz, self.out_channels, 1, 1))?;
        self.block.forward_with(x, Some(&bias))
    }
}

/// Noise-predicting U-Net.
#[derive(Debug, Clone)]
struct UNet {
    time1: Linear,
    time2: Linear,
    time_dim: usize,
    class_table: Embedding,
    conv_in: Conv2d,
    downs: Vec<(TimedBlock, Option<Conv2d>)>,
    mid1: TimedBlock,
    attention: CrossAttention,
    mid2: TimedBlock,
    ups: Vec<(TimedBlock, Option<Conv2d>)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    fn new(b: &Builder, cfg: &DiffusionConfig, latent_channels: usize) -> Result<Self> {
        let ch = &cfg.unet_channels;
        let base = ch[0];
        let temb = 4 * base;
        let time_dim = base.max(2) & !1;
        let mut downs = Vec::new();
        let mut prev = base;
        for (i, &c) in ch.iter().enumerate() {
            let block = TimedBlock::new(&b.pp(format!("down{i}")), prev, c, temb)?;
            let down = if i + 1 < ch.len() {
                Some(Conv2d::new(&b.pp(format!("down{i}.sample")), c, c, 3, 1, 2)?)
            } else {
                None
            };
            downs.push((block, down));
            prev = c;
        }
        let last = prev;
        let mut ups = Vec::new();
        for i in (0..ch.len()).rev() {
            let c = ch[i];
            let block = TimedBlock::new(&b.pp(format!("up{i}")), prev + c, c, temb)?;
            let up = if i > 0 {
                Some(Conv2d::new(&b.pp(format!("up{i}.sample")), c, c, 3, 1, 1)?)
            } else {
                None
            };
            ups.push((block, up));
            prev = c;
        }
        Ok(Self {
            time1: Linear::new(&b.pp("time1"), time_dim, temb)?,
            time2: Linear::new(&b.pp("time2"), temb, temb)?,
            time_dim,
            class_table: Embedding::new(&b.pp("class_table"), NUM_CLASSES, cfg.embedding_dim)?,
            conv_in: Conv2d::new(&b.pp("conv_in"), latent_channels, base, 3, 1, 1)?,
            downs,
            mid1: TimedBlock::new(&b.pp("mid1"), last, last, temb)?,
            attention: CrossAttention::new(&b.pp("attention"), last, cfg.embedding_dim, cfg.attention_heads)?,
            mid2: TimedBlock::new(&b.pp("mid2"), last, last, temb)?,
            ups,
            norm_out: GroupNorm::new(&b.pp("norm_out"), norm_groups(base), base)?,
            conv_out: Conv2d::with_gain(&b.pp("conv_out"), base, latent_channels, 3, 1, 1, 0.1)?,
        })
    }

    fn forward(&self, x: &Tensor, steps: &[usize], classes: &[usize]) -> Result<Tensor> {
        let dev = x.device();
        let temb = timestep_embedding(steps, self.time_dim, dev)?;
        let temb = silu(&self.time2.forward(&silu(&self.time1.forward(&temb)?)?)?)?;
        let context = self.class_table.forward(&ids_tensor(classes, dev)?)?.unsqueeze(1)?;

        let mut h = self.conv_in.forward(x)?;
        let mut skips = Vec::with_capacity(self.downs.len());
        for (block, down) in &self.downs {
            h = block.forward(&h, &temb)?;
            skips.push(h.clone());
            if let Some(down) = down {
                h = down.forward(&h)?;
            }
        }
        h = self.mid1.forward(&h, &temb)?;
        h = self.attention.forward(&h, &context)?;
        h = self.mid2.forward(&h, &temb)?;
        for (block, up) in &self.ups {
            let skip = skips.pop().expect("one skip per level");
            h = block.forward(&Tensor::cat(&[&h, &skip], 1)?, &temb)?;
            if let Some(up) = up {
                h = up.forward(&upsample2x(&h)?)?;
            }
        }
        Ok(self.conv_out.forward(&silu(&self.norm_out.forward(&h)?)?)?)
    }
}

/// Denoiser state with its schedule.
#[derive(Debug)]
pub struct Denoiser {
    pub config: DiffusionConfig,
    pub schedule: NoiseSchedule,
    pub latent_channels: usize,
    pub latent_size: usize,
    /// Classes present in the training data.
    pub trained_classes: Vec<usize>,
    store: ParamStore,
    unet: UNet,
    evaluations: AtomicUsize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SectionMeta {
    config: DiffusionConfig,
    latent_channels: usize,
    latent_size: usize,
    trained_classes: Vec<usize>,
    epoch: usize,
    val_loss: f64,
}

impl Denoiser {
    pub fn new(config: &DiffusionConfig, latent_channels: usize, latent_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let levels = config.unet_channels.len();
        if latent_size % (1 << (levels - 1)) != 0 {
            return Err(Error::Config(vec![ConfigIssue::new(
                "ldm.unet_channels",
                format!("latent size {latent_size} is not divisible by 2^{}", levels - 1),
            )]));
        }
        let store = ParamStore::new(seed);
        let unet = UNet::new(&store.root().pp("unet"), config, latent_channels)?;
        Ok(Self {
            config: config.clone(),
            schedule: make_schedule(config)?,
            latent_channels,
            latent_size,
            trained_classes: Vec::new(),
            store,
            unet,
            evaluations: AtomicUsize::new(0),
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn class_table_rows(&self) -> usize {
        self.unet.class_table.rows()
    }

    /// Number of denoiser evaluations performed while sampling.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }

    /// Predicted noise for a batch.
    pub fn predict_noise(&self, x: &Tensor, steps: &[usize], classes: &[usize]) -> Result<Tensor> {
        self.unet.forward(x, steps, classes)
    }

    /// Ancestral sampling of one latent per `(condition, seed)`; each sample
    /// draws all of its noise from its own seeded stream.
    pub fn sample_latents(&self, conditions: &[ClassCondition], seeds: &[u64]) -> Result<Vec<LatentGrid>> {
        if conditions.len() != seeds.len() {
            return Err(Error::Input("one seed per condition required".into()));
        }
        if conditions.is_empty() {
            return Ok(Vec::new());
        }
        for c in conditions {
            if !self.trained_classes.is_empty() && !self.trained_classes.contains(&c.index()) {
                warn!("sampling {} which had no training data", c.name());
            }
        }
        let dev = self.store.device().clone();
        let (c, s) = (self.latent_channels, self.latent_size);
        let n = c * s * s;
        let b = conditions.len();
        let mut rngs: Vec<_> = seeds.iter().map(|&sd| rng_from_seed(sd)).collect();
        let draw = |rngs: &mut Vec<rand_chacha::ChaCha8Rng>| -> Result<Tensor> {
            let mut data = Vec::with_capacity(b * n);
            for r in rngs.iter_mut() {
                data.extend((0..n).map(|_| {
                    let z: f32 = StandardNormal.sample(r);
                    z
                }));
            }
            Ok(Tensor::from_vec(data, (b, c, s, s), &dev)?)
        };
        let classes: Vec<usize> = conditions.iter().map(|c| c.index()).collect();
        let sch = &self.schedule;
        let mut x = draw(&mut rngs)?;
        for t in (0..sch.num_steps()).rev() {
            let eps = self.unet.forward(&x, &vec![t; b], &classes)?;
            self.evaluations.fetch_add(1, Ordering::Relaxed);
            let beta = sch.betas[t];
            let ab = sch.alphas_cumprod[t];
            let mean = ((&x - (eps * (beta / (1.0 - ab).sqrt()))?)? / (1.0 - beta).sqrt())?;
            x = if t > 0 {
                let ab_prev = sch.alphas_cumprod[t - 1];
                let var = beta * (1.0 - ab_prev) / (1.0 - ab);
                (mean + (draw(&mut rngs)? * var.sqrt())?)?
            } else {
                mean
            };
        }
        LatentGrid::from_batch(&x)
    }

    pub fn sample_latent(&self, condition: ClassCondition, seed: u64) -> Result<LatentGrid> {
        Ok(self.sample_latents(&[condition], &[seed])?.remove(0))
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint, epoch: usize, val_loss: f64) -> Result<()> {
        ck.add_section(
            SECTION,
            &SectionMeta {
                config: self.config.clone(),
                latent_channels: self.latent_channels,
                latent_size: self.latent_size,
                trained_classes: self.trained_classes.clone(),
                epoch,
                val_loss,
            },
            &self.store,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: SectionMeta = ck.section_meta(SECTION)?;
        let mut d = Self::new(&meta.config, meta.latent_channels, meta.latent_size, 0)?;
        ck.load_into(SECTION, &d.store)?;
        d.trained_classes = meta.trained_classes;
        Ok(d)
    }
}

/// Latents of a labelled image set, already multiplied by the autoencoder's
/// latent scale.
#[derive(Debug, Clone)]
pub struct LatentDataset {
    pub latents: Vec<LatentGrid>,
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LatentDatasetMeta {
    classes: Vec<usize>,
    count: usize,
}

impl LatentDataset {
    pub fn encode(vae: &Autoencoder, images: &[&GrayImage], classes: &[usize]) -> Result<Self> {
        if images.len() != classes.len() {
            return Err(Error::Input("one class per image required".into()));
        }
        let scale = vae.latent_scale as f32;
        let latents = vae
            .encode(images)?
            .into_iter()
            .map(|mut l| {
                l.values.iter_mut().for_each(|v| *v *= scale);
                l
            })
            .collect();
        Ok(Self {
            latents,
            classes: classes.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    fn tensor(&self) -> Result<Tensor> {
        LatentGrid::batch_tensor(&self.latents.iter().collect::<Vec<_>>(), &Device::Cpu)
    }

    /// Writes the latents together with the autoencoder that produced them.
    pub fn save(path: &Path, sets: &BTreeMap<String, LatentDataset>, vae: &Autoencoder) -> Result<()> {
        let mut ck = Checkpoint::new(LATENTS_KIND);
        vae.to_checkpoint(&mut ck, 0, f64::NAN)?;
        for (name, set) in sets {
            let meta = LatentDatasetMeta {
                classes: set.classes.clone(),
                count: set.len(),
            };
            ck.header.sections.insert(format!("latents.{name}"), serde_json::to_value(meta)?);
            if !set.is_empty() {
                ck.add_tensor(&format!("latents.{name}"), "values", set.tensor()?);
            }
        }
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<(BTreeMap<String, LatentDataset>, Autoencoder)> {
        let ck = Checkpoint::load_kind(path, LATENTS_KIND)?;
        let vae = Autoencoder::from_checkpoint(&ck)?;
        let mut out = BTreeMap::new();
        let names: Vec<String> = ck
            .header
            .sections
            .keys()
            .filter_map(|k| k.strip_prefix("latents.").map(str::to_string))
            .collect();
        for name in names {
            let section = format!("latents.{name}");
            let meta: LatentDatasetMeta = ck.section_meta(&section)?;
            let latents = if meta.count == 0 {
                Vec::new()
            } else {
                LatentGrid::from_batch(ck.tensor(&section, "values")?)?
            };
            out.insert(
                name,
                LatentDataset {
                    latents,
                    classes: meta.classes,
                },
            );
        }
        Ok((out, vae))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub struct TrainedDiffusion {
    pub denoiser: Denoiser,
    pub history: Vec<DiffusionEpoch>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            z
        })
        .collect()
}

/// Trains the denoiser with an L1 loss on the predicted noise. Stops after
/// `config.patience` epochs without validation improvement or at
/// `max_epochs`, and returns the best-validation state.
pub fn train_diffusion(
    train: &LatentDataset,
    val: &LatentDataset,
    config: &DiffusionConfig,
    max_epochs: usize,
    seed: u64,
) -> Result<TrainedDiffusion> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Input("empty diffusion training set".into()));
    }
    if max_epochs == 0 {
        return Err(Error::Input("max_epochs must be at least 1".into()));
    }
    let (c, s) = (train.latents[0].channels, train.latents[0].size);
    let mut denoiser = Denoiser::new(config, c, s, derive_seed(seed, "ldm-init", 0))?;
    let mut present: Vec<usize> = train.classes.clone();
    present.sort_unstable();
    present.dedup();
    let missing: Vec<&str> = (0..NUM_CLASSES)
        .filter(|k| !present.contains(k))
        .map(class_name)
        .collect();
    if !missing.is_empty() {
        warn!("no diffusion training data for: {}", missing.join(", "));
    }
    denoiser.trained_classes = present;

    let val = if val.is_empty() { train } else { val };
    let train_x = train.tensor()?;
    let val_x = val.tensor()?;
    let n = c * s * s;
    let steps = denoiser.schedule.num_steps();

    // fixed validation draws so epochs are comparable
    let mut vrng = rng_from_seed(derive_seed(seed, "ldm-val", 0));
    let val_steps: Vec<usize> = (0..val.len()).map(|_| vrng.random_range(0..steps)).collect();
    let val_noise = Tensor::from_vec(gaussian(&mut vrng, val.len() * n), val_x.dims(), &Device::Cpu)?;

    let mut opt = adam(denoiser.store.trainable(), config.learning_rate, 0.9, 0.999)?;
    let mut rng = rng_from_seed(derive_seed(seed, "ldm-batches", 0));
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, BTreeMap<String, Tensor>)> = None;
    let mut stale = 0;
    for epoch in 0..max_epochs {
        let mut total = 0.0;
        let batches = shuffled_batches(train.len(), config.batch_size, &mut rng);
        for (bi, idx) in batches.iter().enumerate() {
            let ids = ids_tensor(idx, &Device::Cpu)?;
            let x0 = train_x.index_select(&ids, 0)?;
            let t: Vec<usize> = idx.iter().map(|_| rng.random_range(0..steps)).collect();
            let noise = Tensor::from_vec(gaussian(&mut rng, idx.len() * n), x0.dims(), &Device::Cpu)?;
            let classes: Vec<usize> = idx.iter().map(|&i| train.classes[i]).collect();
            let xt = q_sample(&x0, &t, &noise, &denoiser.schedule)?;
            let pred = denoiser.unet.forward(&xt, &t, &classes)?;
            let loss = (pred - &noise)?.abs()?.mean_all()?;
            total += finite_scalar(&loss, "ldm", epoch, bi)?;
            opt.backward_step(&loss)?;
        }
        let train_loss = total / batches.len() as f64;
        let val_loss = validation_loss(&denoiser, &val_x, &val_steps, &val_noise, &val.classes)?;
        info!("ldm epoch {epoch}: train {train_loss:.4} val {val_loss:.4}");
        history.push(DiffusionEpoch {
            epoch,
            train_loss,
            val_loss,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, denoiser.store.snapshot()?));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                info!("ldm early stop at epoch {epoch}");
                break;
            }
        }
    }
    let (best_val_loss, best_epoch, snap) = best.expect("at least one epoch");
    denoiser.store.restore(&snap)?;
    Ok(TrainedDiffusion {
        denoiser,
        history,
        best_epoch,
        best_val_loss,
    })
}

fn validation_loss(d: &Denoiser, x: &Tensor, steps: &[usize], noise: &Tensor, classes: &[usize]) -> Result<f64> {
    let n = steps.len();
    let mut total = 0.0;
    for start in (0..n).step_by(64) {
        let len = 64.min(n - start);
        let x0 = x.narrow(0, start, len)?;
        let e = noise.narrow(0, start, len)?;
        let t = &steps[start..start + len];
        let xt = q_sample(&x0, t, &e, &d.schedule)?;
        let pred = d.unet.forward(&xt, t, &classes[start..start + len])?;
        total += (pred - e)?.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    Ok(total / x.elem_count() as f64)
}

/// Denoiser plus the autoencoder that decodes its samples.
pub struct LatentDiffusion {
    pub denoiser: Denoiser,
    pub vae: Autoencoder,
}

impl LatentDiffusion {
    pub fn generate_images(&self, conditions: &[ClassCondition], seeds: &[u64]) -> Result<Vec<GrayImage>> {
        let latents = self.denoiser.sample_latents(conditions, seeds)?;
        let inv = (1.0 / self.vae.latent_scale) as f32;
        let scaled: Vec<LatentGrid> = latents
            .into_iter()
            .map(|mut l| {
                l.values.iter_mut().for_each(|v| *v *= inv);
                l
            })
            .collect();
        self.vae.decode(&scaled.iter().collect::<Vec<_>>())
    }

    pub fn generate_image(&self, condition: ClassCondition, seed: u64) -> Result<GrayImage> {
        Ok(self.generate_images(&[condition], &[seed])?.remove(0))
    }

    pub fn save(&self, path: &Path, epoch: usize, val_loss: f64) -> Result<()> {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND);
        self.denoiser.to_checkpoint(&mut ck, epoch, val_loss)?;
        self.vae.to_checkpoint(&mut ck, 0, f64::NAN)?;
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load_kind(path, CHECKPOINT_KIND)?;
        Ok(Self {
            denoiser: Denoiser::from_checkpoint(&ck)?,
            vae: Autoencoder::from_checkpoint(&ck)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config(steps: usize) -> DiffusionConfig {
        DiffusionConfig {
            unet_channels: vec![8, 16],
            num_steps: steps,
            embedding_dim: 8,
            schedule_kind: ScheduleKind::Linear,
            ..DiffusionConfig::toy()
        }
    }

    #[test]
    fn latent_file_round_trips_with_its_autoencoder() {
        let vae = Autoencoder::new(&crate::vae::AutoencoderConfig::toy(), 1).unwrap();
        let img = GrayImage::new(32, (0..1024).map(|i| (i % 5) as f32 / 5.0).collect()).unwrap();
        let mut sets = BTreeMap::new();
        sets.insert("train".to_string(), LatentDataset::encode(&vae, &[&img, &img], &[2, 3]).unwrap());
        sets.insert(
            "validation".to_string(),
            LatentDataset {
                latents: Vec::new(),
                classes: Vec::new(),
            },
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("latents.safetensors");
        LatentDataset::save(&path, &sets, &vae).unwrap();
        let (loaded, vae2) = LatentDataset::load(&path).unwrap();
        assert_eq!(loaded["train"].classes, vec![2, 3]);
        assert_eq!(loaded["train"].latents, sets["train"].latents);
        assert!(loaded["validation"].is_empty());
        assert_eq!(vae2.latent_scale, vae.latent_scale);
    }

    #[test]
    fn linear_schedule_first_step() {
        let sch = make_schedule(&DiffusionConfig::reference()).unwrap();
        assert_eq!(sch.num_steps(), 1000);
        assert_eq!(sch.alphas_cumprod[0], 1.0 - sch.betas[0]);
        assert!((sch.betas[0] - 1e-4).abs() < 1e-15);
        assert!((sch.betas[999] - 2e-2).abs() < 1e-15);
        assert!(sch.betas.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn cumulative_products_strictly_decrease() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for steps in [1, 10, 100, 1000] {
                let cfg = DiffusionConfig {
                    num_steps: steps,
                    schedule_kind: kind,
                    ..DiffusionConfig::toy()
                };
                let sch = make_schedule(&cfg).unwrap();
                assert!(sch.betas.iter().all(|&b| b > 0.0 && b < 1.0));
                assert!(sch.alphas_cumprod.windows(2).all(|w| w[1] < w[0]));
                assert!(sch.alphas_cumprod[0] <= 1.0);
            }
        }
    }

    #[test]
    fn ten_step_product_matches_direct_product() {
        let sch = make_schedule(&toy_config(10)).unwrap();
        let direct: f64 = sch.betas.iter().map(|b| 1.0 - b).product();
        assert_eq!(sch.alphas_cumprod[9], direct);
    }

    #[test]
    fn zero_steps_is_config_error() {
        let cfg = DiffusionConfig {
            num_steps: 0,
            ..DiffusionConfig::toy()
        };
        assert!(matches!(make_schedule(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn forward_noise_hand_fixture() {
        let sch = NoiseSchedule {
            betas: vec![0.36],
            alphas_cumprod: vec![0.64],
        };
        let out = forward_noise(&[1.0; 4], 0, &[1.0; 4], &sch).unwrap();
        for v in out {
            assert!((v - 1.4).abs() < 1e-12);
        }
        assert!(matches!(forward_noise(&[1.0], 1, &[1.0], &sch), Err(Error::Input(_))));
    }

    #[test]
    fn forward_noise_limits() {
        let clean = NoiseSchedule {
            betas: vec![1e-300],
            alphas_cumprod: vec![1.0],
        };
        assert_eq!(forward_noise(&[0.3, -2.0], 0, &[5.0, 7.0], &clean).unwrap(), vec![0.3, -2.0]);
        let noisy = NoiseSchedule {
            betas: vec![1.0 - 1e-300],
            alphas_cumprod: vec![0.0],
        };
        assert_eq!(forward_noise(&[0.3, -2.0], 0, &[5.0, 7.0], &noisy).unwrap(), vec![5.0, 7.0]);
    }

    fn random_dataset(n: usize, seed: u64) -> LatentDataset {
        let mut rng = rng_from_seed(seed);
        LatentDataset {
            latents: (0..n)
                .map(|i| {
                    // class-dependent mean so conditioning matters
                    let shift = if i % 2 == 0 { 1.0 } else { -1.0 };
                    let v = gaussian(&mut rng, 3 * 16).into_iter().map(|z| 0.3 * z + shift).collect();
                    LatentGrid::new(3, 4, v).unwrap()
                })
                .collect(),
            classes: (0..n).map(|i| if i % 2 == 0 { 4 } else { 9 }).collect(),
        }
    }

    #[test]
    fn denoiser_has_fifteen_class_rows_and_counts_evaluations() {
        let d = Denoiser::new(&toy_config(10), 3, 4, 0).unwrap();
        assert_eq!(d.class_table_rows(), 15);
        let cond = ClassCondition::new(4).unwrap();
        let a = d.sample_latent(cond, 11).unwrap();
        assert_eq!(d.evaluations(), 10);
        let b = d.sample_latent(cond, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.values.iter().all(|v| v.is_finite()));
        let c = d.sample_latent(cond, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let train = random_dataset(64, 1);
        let val = random_dataset(16, 2);
        let cfg = toy_config(10);
        let a = train_diffusion(&train, &val, &cfg, 6, 3).unwrap();
        let b = train_diffusion(&train, &val, &cfg, 6, 3).unwrap();
        assert_eq!(a.history, b.history);
        assert!(a.best_val_loss < a.history[0].val_loss);
        assert_eq!(a.denoiser.trained_classes, vec![4, 9]);
    }

    #[test]
    fn early_stopping_respects_patience() {
        let train = random_dataset(16, 1);
        let cfg = DiffusionConfig {
            patience: 1,
            learning_rate: 1e-12,
            ..toy_config(10)
        };
        let out = train_diffusion(&train, &LatentDataset { latents: vec![], classes: vec![] }, &cfg, 50, 0).unwrap();
        assert!(out.history.len() < 50);
    }
}
