//! Vector-quantized autoencoder: images to a small spatial latent grid and
//! back, trained with L1 reconstruction, a feature-space (perceptual) term,
//! and a hinge-loss patch discriminator.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::Optimizer;
use log::{info, warn};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigIssue, Error, Result};
use crate::image_io::{batch_tensor, images_from_tensor, GrayImage};
use crate::nn::blocks::{norm_groups, ResBlock};
use crate::nn::{adam, finite_scalar, leaky_relu, shuffled_batches, silu, upsample2x, Builder, Checkpoint, Conv2d, GroupNorm, Init, ParamStore};
use crate::seeds::{derive_seed, rng_from_seed};

pub const CHECKPOINT_KIND: &str = "vae";
pub const SECTION: &str = "vae";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub image_size: usize,
    pub stage_channels: Vec<usize>,
    /// Total spatial reduction; a power of two, at most `2^len(stage_channels)`.
    pub downsample_factor: usize,
    pub latent_channels: usize,
    pub codebook_size: usize,
    pub commitment_weight: f64,
    pub learning_rate: f64,
    pub perceptual_weight: f64,
    pub adversarial_weight: f64,
    /// Fraction of epochs before the patch discriminator starts.
    pub disc_warmup_fraction: f64,
    pub disc_channels: usize,
    pub batch_size: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl AutoencoderConfig {
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            stage_channels: vec![16, 32],
            downsample_factor: 4,
            latent_channels: 3,
            codebook_size: 64,
            commitment_weight: 0.25,
            learning_rate: 2e-3,
            perceptual_weight: 0.1,
            adversarial_weight: 0.05,
            disc_warmup_fraction: 0.1,
            disc_channels: 16,
            batch_size: 32,
        }
    }

    pub fn reference() -> Self {
        Self {
            image_size: 256,
            stage_channels: vec![32, 64, 128],
            downsample_factor: 4,
            latent_channels: 3,
            codebook_size: 512,
            commitment_weight: 0.25,
            learning_rate: 4.5e-6,
            perceptual_weight: 1.0,
            adversarial_weight: 0.5,
            disc_warmup_fraction: 0.1,
            disc_channels: 64,
            batch_size: 16,
        }
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.downsample_factor
    }

    fn num_downsamples(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    pub fn issues(&self, prefix: &str) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let f = |n: &str| format!("{prefix}.{n}");
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            out.push(ConfigIssue::new(f("stage_channels"), "must be a non-empty list of positive integers"));
        }
        if self.image_size == 0 || self.image_size % (1 << self.stage_channels.len().min(30)) != 0 {
            out.push(ConfigIssue::new(
                f("image_size"),
                format!("{} is not divisible by 2^{}", self.image_size, self.stage_channels.len()),
            ));
        }
        if !self.downsample_factor.is_power_of_two()
            || self.num_downsamples() > self.stage_channels.len()
        {
            out.push(ConfigIssue::new(
                f("downsample_factor"),
                "must be a power of two no larger than 2^len(stage_channels)",
            ));
        }
        for (name, v) in [
            ("latent_channels", self.latent_channels),
            ("codebook_size", self.codebook_size),
            ("disc_channels", self.disc_channels),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                out.push(ConfigIssue::new(f(name), "must be positive"));
            }
        }
        if !(self.learning_rate > 0.0) {
            out.push(ConfigIssue::new(f("learning_rate"), "must be positive"));
        }
        for (name, v) in [
            ("commitment_weight", self.commitment_weight),
            ("perceptual_weight", self.perceptual_weight),
            ("adversarial_weight", self.adversarial_weight),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                out.push(ConfigIssue::new(f(name), "must be a non-negative real"));
            }
        }
        if !(0.0..=1.0).contains(&self.disc_warmup_fraction) {
            out.push(ConfigIssue::new(f("disc_warmup_fraction"), "must lie in [0, 1]"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues("vae");
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    conv_in: Conv2d,
    stages: Vec<(ResBlock, Option<Conv2d>)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Encoder {
    fn new(b: &Builder, cfg: &AutoencoderConfig) -> Result<Self> {
        let ch = &cfg.stage_channels;
        let conv_in = Conv2d::new(&b.pp("conv_in"), 1, ch[0], 3, 1, 1)?;
        let mut stages = Vec::new();
        let mut prev = ch[0];
        for (i, &c) in ch.iter().enumerate() {
            let block = ResBlock::new(&b.pp(format!("stage{i}.block")), prev, c)?;
            let down = if i < cfg.num_downsamples() {
                Some(Conv2d::new(&b.pp(format!("stage{i}.down")), c, c, 3, 1, 2)?)
            } else {
                None
            };
            stages.push((block, down));
            prev = c;
        }
        Ok(Self {
            conv_in,
            stages,
            norm_out: GroupNorm::new(&b.pp("norm_out"), norm_groups(prev), prev)?,
            conv_out: Conv2d::new(&b.pp("conv_out"), prev, cfg.latent_channels, 1, 0, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(x)?;
        for (block, down) in &self.stages {
            h = block.forward_with(&h, None)?;
            if let Some(down) = down {
                h = down.forward(&h)?;
            }
        }
        Ok(self.conv_out.forward(&silu(&self.norm_out.forward(&h)?)?)?)
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    conv_in: Conv2d,
    stages: Vec<(ResBlock, Option<Conv2d>)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Decoder {
    fn new(b: &Builder, cfg: &AutoencoderConfig) -> Result<Self> {
        let ch = &cfg.stage_channels;
        let last = *ch.last().expect("validated non-empty");
        let conv_in = Conv2d::new(&b.pp("conv_in"), cfg.latent_channels, last, 3, 1, 1)?;
        let mut stages = Vec::new();
        let mut prev = last;
        for i in (0..ch.len()).rev() {
            let c = ch[i];
            let block = ResBlock::new(&b.pp(format!("stage{i}.block")), prev, c)?;
            let up = if i < cfg.num_downsamples() {
                Some(Conv2d::new(&b.pp(format!("stage{i}.up")), c, c, 3, 1, 1)?)
            } else {
                None
            };
            stages.push((block, up));
            prev = c;
        }
        Ok(Self {
            conv_in,
            stages,
            norm_out: GroupNorm::new(&b.pp("norm_out"), norm_groups(prev), prev)?,
            conv_out: Conv2d::new(&b.pp("conv_out"), prev, 1, 3, 1, 1)?,
        })
    }

    fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(z)?;
        for (block, up) in &self.stages {
            h = block.forward_with(&h, None)?;
            if let Some(up) = up {
                h = up.forward(&upsample2x(&h)?)?;
            }
        }
        let out = self.conv_out.forward(&silu(&self.norm_out.forward(&h)?)?)?;
        Ok(candle_nn::ops::sigmoid(&out)?)
    }
}

/// Spatial latent of one image, channel-major `(channels, size, size)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub channels: usize,
    pub size: usize,
    pub values: Vec<f32>,
}

impl LatentGrid {
    pub fn new(channels: usize, size: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != channels * size * size {
            return Err(Error::Input(format!(
                "{} values for a {channels}x{size}x{size} latent",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("latent has non-finite entries".into()));
        }
        Ok(Self { channels, size, values })
    }

    pub fn zeros(channels: usize, size: usize) -> Self {
        Self {
            channels,
            size,
            values: vec![0.0; channels * size * size],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.size, self.size, self.channels)
    }

    pub fn batch_tensor(grids: &[&LatentGrid], device: &Device) -> Result<Tensor> {
        let first = grids.first().ok_or_else(|| Error::Input("empty latent batch".into()))?;
        let (c, s) = (first.channels, first.size);
        let mut data = Vec::with_capacity(grids.len() * c * s * s);
        for g in grids {
            if g.channels != c || g.size != s {
                return Err(Error::Input("latent batch with mixed shapes".into()));
            }
            data.extend_from_slice(&g.values);
        }
        Ok(Tensor::from_vec(data, (grids.len(), c, s, s), device)?)
    }

    pub fn from_batch(t: &Tensor) -> Result<Vec<LatentGrid>> {
        let (b, c, h, w) = t.dims4()?;
        if h != w {
            return Err(Error::Input("non-square latent".into()));
        }
        let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let n = c * h * w;
        (0..b)
            .map(|i| LatentGrid::new(c, h, flat[i * n..(i + 1) * n].to_vec()))
            .collect()
    }
}

/// Trained (or freshly initialized) autoencoder.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub config: AutoencoderConfig,
    store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    codebook: Tensor,
    /// Multiplier applied to latents before diffusion (1 / latent std).
    pub latent_scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SectionMeta {
    config: AutoencoderConfig,
    latent_scale: f64,
    epoch: usize,
    /// Absent when no validation error was measured.
    val_recon: Option<f64>,
}

impl Autoencoder {
    pub fn new(config: &AutoencoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed);
        let root = store.root();
        let encoder = Encoder::new(&root.pp("encoder"), config)?;
        let decoder = Decoder::new(&root.pp("decoder"), config)?;
        let codebook = root.pp("quantizer").get(
            "codebook",
            &[config.codebook_size, config.latent_channels],
            Init::Normal { std: 1.0 },
        )?;
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            decoder,
            codebook,
            latent_scale: 1.0,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn latent_shape(&self) -> (usize, usize) {
        (self.config.latent_channels, self.config.latent_size())
    }

    fn check_images(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.config.image_size;
        if c != 1 || h != s || w != s {
            return Err(Error::Input(format!(
                "expected 1x{s}x{s} images, got {c}x{h}x{w}"
            )));
        }
        Ok(())
    }

    fn check_latents(&self, z: &Tensor) -> Result<()> {
        let (_, c, h, w) = z.dims4()?;
        let (lc, ls) = self.latent_shape();
        if c != lc || h != ls || w != ls {
            return Err(Error::Input(format!(
                "expected {lc}x{ls}x{ls} latents, got {c}x{h}x{w}"
            )));
        }
        Ok(())
    }

    /// Unquantized encoder output `(B, C, h, w)`.
    pub fn encode_continuous(&self, x: &Tensor) -> Result<Tensor> {
        self.check_images(x)?;
        self.encoder.forward(x)
    }

    /// Nearest codebook index per latent position, lowest index on ties,
    /// in `(B, h, w)` order.
    pub fn nearest_codes(&self, z: &Tensor) -> Result<Vec<u32>> {
        let (b, c, h, w) = z.dims4()?;
        let flat = z.permute((0, 2, 3, 1))?.flatten_all()?.to_vec1::<f32>()?;
        let book = self.codebook.flatten_all()?.to_vec1::<f32>()?;
        let k = book.len() / c;
        let mut out = Vec::with_capacity(b * h * w);
        for v in flat.chunks(c) {
            let mut best = (f32::INFINITY, 0u32);
            for j in 0..k {
                let e = &book[j * c..(j + 1) * c];
                let d: f32 = v.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, j as u32);
                }
            }
            out.push(best.1);
        }
        Ok(out)
    }

    /// Replaces each latent vector by its nearest codebook entry. Returns
    /// the quantized tensor (differentiable w.r.t. the codebook) and the
    /// chosen indices.
    pub fn quantize(&self, z: &Tensor) -> Result<(Tensor, Vec<u32>)> {
        let (b, c, h, w) = z.dims4()?;
        let codes = self.nearest_codes(z)?;
        let ids = Tensor::from_vec(codes.clone(), codes.len(), z.device())?;
        let zq = self
            .codebook
            .index_select(&ids, 0)?
            .reshape((b, h, w, c))?
            .permute((0, 3, 1, 2))?
            .contiguous()?;
        Ok((zq, codes))
    }

    /// Quantized latents for a batch of images.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.encode_continuous(x)?;
        Ok(self.quantize(&z)?.0)
    }

    /// Images in [0, 1] from latents; latents are snapped to the codebook first.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        self.check_latents(z)?;
        let zq = self.quantize(z)?.0;
        self.decoder.forward(&zq)
    }

    pub fn encode(&self, images: &[&GrayImage]) -> Result<Vec<LatentGrid>> {
        let mut out = Vec::with_capacity(images.len());
        for batch in images.chunks(64) {
            let x = batch_tensor(batch, self.store.device())?;
            out.extend(LatentGrid::from_batch(&self.encode_tensor(&x)?)?);
        }
        Ok(out)
    }

    pub fn decode(&self, latents: &[&LatentGrid]) -> Result<Vec<GrayImage>> {
        let mut out = Vec::with_capacity(latents.len());
        for batch in latents.chunks(64) {
            let z = LatentGrid::batch_tensor(batch, self.store.device())?;
            out.extend(images_from_tensor(&self.decode_tensor(&z)?)?);
        }
        Ok(out)
    }

    /// Mean absolute reconstruction error of `decode(encode(x))`.
    pub fn reconstruction_error(&self, images: &[&GrayImage]) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::Input("no images to reconstruct".into()));
        }
        let mut total = 0.0;
        for batch in images.chunks(64) {
            let x = batch_tensor(batch, self.store.device())?;
            let y = self.decoder.forward(&self.encode_tensor(&x)?)?;
            total += (y - &x)?.abs()?.sum_all()?.to_scalar::<f32>()? as f64;
        }
        let s = self.config.image_size;
        Ok(total / (images.len() * s * s) as f64)
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint, epoch: usize, val_recon: f64) -> Result<()> {
        ck.add_section(
            SECTION,
            &SectionMeta {
                config: self.config.clone(),
                latent_scale: self.latent_scale,
                epoch,
                val_recon: Some(val_recon).filter(|v| v.is_finite()),
            },
            &self.store,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: SectionMeta = ck.section_meta(SECTION)?;
        let mut ae = Self::new(&meta.config, 0)?;
        ck.load_into(SECTION, &ae.store)?;
        ae.latent_scale = meta.latent_scale;
        Ok(ae)
    }

    pub fn save(&self, path: &std::path::Path, epoch: usize, val_recon: f64) -> Result<()> {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND);
        self.to_checkpoint(&mut ck, epoch, val_recon)?;
        ck.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if !ck.has_section(SECTION) {
            return Err(Error::Checkpoint(format!(
                "{} has no autoencoder section",
                path.display()
            )));
        }
        Self::from_checkpoint(&ck)
    }
}

/// Source of feature maps for the perceptual term.
pub trait FeatureExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// Frozen randomly initialized conv stack; needs no downloaded weights.
pub struct RandomConvFeatures {
    layers: Vec<Conv2d>,
}

impl RandomConvFeatures {
    pub fn new(seed: u64, channels: &[usize]) -> Result<Self> {
        let store = ParamStore::new(seed);
        let root = store.root();
        let mut prev = 1;
        let mut layers = Vec::new();
        for (i, &c) in channels.iter().enumerate() {
            let w = root.pp(format!("l{i}"));
            layers.push(Conv2d {
                weight: w.buffer("weight", &[c, prev, 3, 3], Init::FanIn { gain: 2f64.sqrt() })?,
                bias: None,
                padding: 1,
                stride: if i == 0 { 1 } else { 2 },
            });
            prev = c;
        }
        Ok(Self { layers })
    }
}

impl FeatureExtractor for RandomConvFeatures {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.clone();
        let mut out = Vec::new();
        for l in &self.layers {
            h = leaky_relu(&l.forward(&h)?, 0.2)?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// Patch classifier: three stride-2 stages, then a per-patch logit map.
pub struct PatchDiscriminator {
    stages: Vec<Conv2d>,
    head: Conv2d,
}

impl PatchDiscriminator {
    pub fn new(b: &Builder, channels: usize) -> Result<Self> {
        let mut stages = Vec::new();
        let mut prev = 1;
        for i in 0..3 {
            let c = channels << i;
            stages.push(Conv2d::new(&b.pp(format!("stage{i}")), prev, c, 3, 1, 2)?);
            prev = c;
        }
        Ok(Self {
            stages,
            head: Conv2d::new(&b.pp("head"), prev, 1, 3, 1, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for s in &self.stages {
            h = leaky_relu(&s.forward(&h)?, 0.2)?;
        }
        Ok(self.head.forward(&h)?)
    }
}

/// Generator-side loss terms of one batch.
pub struct AutoencoderLosses {
    pub reconstruction: Tensor,
    pub commitment: Tensor,
    pub perceptual: Option<Tensor>,
    pub adversarial: Option<Tensor>,
    pub total: Tensor,
    pub reconstruction_out: Tensor,
    /// Codebook index per latent position.
    pub codes: Vec<u32>,
}

/// Forward pass with all loss terms. Terms with zero weight are skipped.
pub fn autoencoder_losses(
    ae: &Autoencoder,
    x: &Tensor,
    features: &dyn FeatureExtractor,
    disc: Option<&PatchDiscriminator>,
) -> Result<AutoencoderLosses> {
    let cfg = &ae.config;
    let z = ae.encode_continuous(x)?;
    let (zq, codes) = ae.quantize(&z)?;
    let codebook_term = (&zq - z.detach())?.sqr()?.mean_all()?;
    let commit_term = (&z - zq.detach())?.sqr()?.mean_all()?;
    let commitment = (codebook_term + (commit_term * cfg.commitment_weight)?)?;
    // straight-through: forward uses zq, gradient flows to z
    let z_st = (&z + (&zq - &z)?.detach())?;
    let y = ae.decoder.forward(&z_st)?;
    let reconstruction = (&y - x)?.abs()?.mean_all()?;
    let mut total = (&reconstruction + &commitment)?;
    let perceptual = if cfg.perceptual_weight > 0.0 {
        let fx = features.features(x)?;
        let fy = features.features(&y)?;
        let mut acc = Tensor::zeros((), DType::F32, x.device())?;
        for (a, b) in fx.iter().zip(&fy) {
            acc = (acc + (a - b)?.abs()?.mean_all()?)?;
        }
        let p = (acc / fx.len().max(1) as f64)?;
        total = (total + (&p * cfg.perceptual_weight)?)?;
        Some(p)
    } else {
        None
    };
    let adversarial = match disc {
        Some(d) if cfg.adversarial_weight > 0.0 => {
            let a = d.forward(&y)?.mean_all()?.neg()?;
            total = (total + (&a * cfg.adversarial_weight)?)?;
            Some(a)
        }
        _ => None,
    };
    Ok(AutoencoderLosses {
        reconstruction,
        commitment,
        perceptual,
        adversarial,
        total,
        reconstruction_out: y,
        codes,
    })
}

/// Hinge discriminator loss, `mean(relu(1 - D(real))) + mean(relu(1 + D(fake)))`.
pub fn hinge_d_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let r = (1.0 - real_logits)?.relu()?.mean_all()?;
    let f = (1.0 + fake_logits)?.relu()?.mean_all()?;
    Ok((r + f)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderEpoch {
    pub epoch: usize,
    pub reconstruction: f64,
    pub commitment: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub discriminator: f64,
    pub total: f64,
    pub val_reconstruction: f64,
    pub codes_used: usize,
}

pub struct TrainedAutoencoder {
    pub model: Autoencoder,
    pub history: Vec<AutoencoderEpoch>,
    pub best_epoch: usize,
    pub best_val_reconstruction: f64,
}

/// Trains for `epochs` epochs and returns the state with the lowest
/// validation reconstruction error (training data is used when the
/// validation set is empty).
pub fn train_autoencoder(
    train: &[&GrayImage],
    val: &[&GrayImage],
    config: &AutoencoderConfig,
    epochs: usize,
    seed: u64,
) -> Result<TrainedAutoencoder> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Input("empty autoencoder training set".into()));
    }
    if epochs == 0 {
        return Err(Error::Input("epochs must be at least 1".into()));
    }
    let ae = Autoencoder::new(config, derive_seed(seed, "vae-init", 0))?;
    let device = ae.store.device().clone();
    let features = RandomConvFeatures::new(derive_seed(seed, "vae-features", 0), &[8, 16])?;
    let disc_store = ParamStore::new(derive_seed(seed, "vae-disc", 0));
    let disc = PatchDiscriminator::new(&disc_store.root(), config.disc_channels)?;
    let disc_start = (config.disc_warmup_fraction * epochs as f64).floor() as usize;
    let use_disc = config.adversarial_weight > 0.0;

    let mut opt_g = adam(ae.store.trainable(), config.learning_rate, 0.5, 0.9)?;
    let mut opt_d = adam(disc_store.trainable(), config.learning_rate, 0.5, 0.9)?;
    let mut rng = rng_from_seed(derive_seed(seed, "vae-batches", 0));

    init_codebook(&ae, train, &mut rng)?;

    let val_set: &[&GrayImage] = if val.is_empty() { train } else { val };
    let mut history = Vec::with_capacity(epochs);
    let mut best: Option<(f64, usize, std::collections::BTreeMap<String, Tensor>)> = None;
    for epoch in 0..epochs {
        let disc_on = use_disc && epoch >= disc_start;
        let mut sums = [0.0f64; 6];
        let mut usage = vec![0usize; config.codebook_size];
        let mut last_x: Option<Tensor> = None;
        let batches = shuffled_batches(train.len(), config.batch_size, &mut rng);
        for (bi, idx) in batches.iter().enumerate() {
            let imgs: Vec<&GrayImage> = idx.iter().map(|&i| train[i]).collect();
            let x = batch_tensor(&imgs, &device)?;
            let losses = autoencoder_losses(&ae, &x, &features, if disc_on { Some(&disc) } else { None })?;
            let total = finite_scalar(&losses.total, "vae", epoch, bi)?;
            opt_g.backward_step(&losses.total)?;
            sums[0] += losses.reconstruction.to_scalar::<f32>()? as f64;
            sums[1] += losses.commitment.to_scalar::<f32>()? as f64;
            if let Some(p) = &losses.perceptual {
                sums[2] += p.to_scalar::<f32>()? as f64;
            }
            if let Some(a) = &losses.adversarial {
                sums[3] += a.to_scalar::<f32>()? as f64;
            }
            sums[5] += total;
            if disc_on {
                let fake = losses.reconstruction_out.detach();
                let d_loss = hinge_d_loss(&disc.forward(&x)?, &disc.forward(&fake)?)?;
                sums[4] += finite_scalar(&d_loss, "vae-discriminator", epoch, bi)?;
                opt_d.backward_step(&d_loss)?;
            }
            for &c in &losses.codes {
                usage[c as usize] += 1;
            }
            last_x = Some(x);
        }
        if let Some(x) = &last_x {
            restart_dead_codes(&ae, &usage, &ae.encode_continuous(x)?, &mut rng)?;
        }
        let n = batches.len() as f64;
        let val_recon = ae.reconstruction_error(val_set)?;
        let codes_used = usage.iter().filter(|&&u| u > 0).count();
        let row = AutoencoderEpoch {
            epoch,
            reconstruction: sums[0] / n,
            commitment: sums[1] / n,
            perceptual: sums[2] / n,
            adversarial: sums[3] / n,
            discriminator: sums[4] / n,
            total: sums[5] / n,
            val_reconstruction: val_recon,
            codes_used,
        };
        info!(
            "vae epoch {epoch}: recon {:.4} total {:.4} val {:.4} codes {codes_used}",
            row.reconstruction, row.total, val_recon
        );
        history.push(row);
        if best.as_ref().is_none_or(|(b, _, _)| val_recon < *b) {
            best = Some((val_recon, epoch, ae.store.snapshot()?));
        }
    }
    let (best_val, best_epoch, snap) = best.expect("at least one epoch");
    ae.store.restore(&snap)?;
    let mut model = ae;
    model.latent_scale = latent_scale(&model, train)?;
    Ok(TrainedAutoencoder {
        model,
        history,
        best_epoch,
        best_val_reconstruction: best_val,
    })
}

fn codebook_name() -> &'static str {
    "quantizer.codebook"
}

/// Seeds the codebook with encoder outputs of random training positions.
fn init_codebook(ae: &Autoencoder, train: &[&GrayImage], rng: &mut impl Rng) -> Result<()> {
    let n = train.len().min(64);
    let pick = sample(rng, train.len(), n);
    let imgs: Vec<&GrayImage> = pick.iter().map(|i| train[i]).collect();
    let z = ae.encode_continuous(&batch_tensor(&imgs, ae.store.device())?)?;
    let k = ae.config.codebook_size;
    let vecs = flatten_positions(&z)?;
    let rows = vecs.dim(0)?;
    let ids: Vec<u32> = (0..k).map(|_| rng.random_range(0..rows) as u32).collect();
    let noise = Tensor::from_vec(
        (0..k * ae.config.latent_channels)
            .map(|_| rng.random_range(-1e-3f32..1e-3))
            .collect::<Vec<_>>(),
        (k, ae.config.latent_channels),
        ae.store.device(),
    )?;
    let init = (vecs.index_select(&Tensor::new(ids.as_slice(), ae.store.device())?, 0)? + noise)?;
    ae.store.set_buffer(codebook_name(), &init)
}

fn flatten_positions(z: &Tensor) -> Result<Tensor> {
    let c = z.dim(1)?;
    Ok(z.permute((0, 2, 3, 1))?.contiguous()?.reshape(((), c))?)
}

/// Moves codebook entries that went unused this epoch onto random encoder
/// outputs, which keeps the codebook from collapsing onto a few entries.
fn restart_dead_codes(ae: &Autoencoder, usage: &[usize], z: &Tensor, rng: &mut impl Rng) -> Result<()> {
    let dead: Vec<usize> = (0..usage.len()).filter(|&i| usage[i] == 0).collect();
    if dead.is_empty() {
        return Ok(());
    }
    let vecs = flatten_positions(z)?.to_vec2::<f32>()?;
    let mut book = ae.codebook.to_vec2::<f32>()?;
    for &d in &dead {
        book[d] = vecs[rng.random_range(0..vecs.len())].clone();
    }
    let c = ae.config.latent_channels;
    let flat: Vec<f32> = book.into_iter().flatten().collect();
    let t = Tensor::from_vec(flat, (usage.len(), c), ae.store.device())?;
    ae.store.set_buffer(codebook_name(), &t)
}

/// `1 / std` of quantized training latents, so diffusion sees unit scale.
fn latent_scale(ae: &Autoencoder, train: &[&GrayImage]) -> Result<f64> {
    let take: Vec<&GrayImage> = train.iter().take(256).copied().collect();
    let latents = ae.encode(&take)?;
    let vals: Vec<f64> = latents.iter().flat_map(|l| l.values.iter().map(|&v| v as f64)).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var <= 1e-12 {
        warn!("latents have near-zero variance; keeping unit scale");
        return Ok(1.0);
    }
    Ok(1.0 / var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{render_corpus, ToySpec};

    fn tiny_config() -> AutoencoderConfig {
        AutoencoderConfig {
            stage_channels: vec![8, 16],
            disc_channels: 8,
            ..AutoencoderConfig::toy()
        }
    }

    fn toy_images(n_patients: usize) -> Vec<GrayImage> {
        let spec = ToySpec {
            num_patients: n_patients,
            ..ToySpec::default()
        };
        render_corpus(&spec).unwrap().into_iter().map(|s| s.image).collect()
    }

    #[test]
    fn shapes_roundtrip() {
        let ae = Autoencoder::new(&tiny_config(), 0).unwrap();
        let imgs = toy_images(2);
        let refs: Vec<&GrayImage> = imgs.iter().collect();
        let lat = ae.encode(&refs).unwrap();
        assert_eq!(lat[0].shape(), (8, 8, 3));
        let back = ae.decode(&lat.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(back.len(), imgs.len());
        assert_eq!(back[0].size(), 32);
    }

    #[test]
    fn reference_latent_shape() {
        let cfg = AutoencoderConfig::reference();
        cfg.validate().unwrap();
        assert_eq!(cfg.latent_size(), 64);
        assert_eq!(cfg.latent_channels, 3);
    }

    #[test]
    fn encode_is_deterministic() {
        let ae = Autoencoder::new(&tiny_config(), 3).unwrap();
        let imgs = toy_images(1);
        let a = ae.encode(&[&imgs[0]]).unwrap();
        let b = ae.encode(&[&imgs[0], &imgs[0]]).unwrap();
        assert_eq!(a[0], b[0]);
        assert_eq!(b[0], b[1]);
    }

    #[test]
    fn quantization_is_idempotent() {
        let ae = Autoencoder::new(&tiny_config(), 1).unwrap();
        let imgs = toy_images(1);
        let x = batch_tensor(&[&imgs[0]], ae.store.device()).unwrap();
        let q = ae.encode_tensor(&x).unwrap();
        let qq = ae.quantize(&q).unwrap().0;
        assert_eq!(
            q.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            qq.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn ties_pick_lowest_index() {
        let ae = Autoencoder::new(&tiny_config(), 1).unwrap();
        let mut book = vec![vec![5.0f32; 3]; 64];
        book[7] = vec![1.0, 0.0, 0.0];
        book[3] = vec![1.0, 0.0, 0.0];
        let t = Tensor::new(book, ae.store.device()).unwrap();
        ae.store.set_buffer(codebook_name(), &t).unwrap();
        let z = Tensor::new(&[1.0f32, 0.0, 0.0], ae.store.device())
            .unwrap()
            .reshape((1, 3, 1, 1))
            .unwrap();
        assert_eq!(ae.nearest_codes(&z).unwrap(), vec![3]);
    }

    #[test]
    fn zero_latent_decodes_in_range() {
        let ae = Autoencoder::new(&tiny_config(), 2).unwrap();
        let z = LatentGrid::zeros(3, 8);
        let img = &ae.decode(&[&z]).unwrap()[0];
        assert!(img.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn shape_mismatch_is_input_error() {
        let ae = Autoencoder::new(&tiny_config(), 2).unwrap();
        let x = Tensor::zeros((1, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(ae.encode_tensor(&x), Err(Error::Input(_))));
        let z = Tensor::zeros((1, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(ae.decode_tensor(&z), Err(Error::Input(_))));
    }

    #[test]
    fn zero_weights_leave_reconstruction_plus_commitment() {
        let cfg = AutoencoderConfig {
            perceptual_weight: 0.0,
            adversarial_weight: 0.0,
            ..tiny_config()
        };
        let ae = Autoencoder::new(&cfg, 4).unwrap();
        let imgs = toy_images(1);
        let x = batch_tensor(&imgs.iter().collect::<Vec<_>>(), ae.store.device()).unwrap();
        let feats = RandomConvFeatures::new(0, &[4]).unwrap();
        let disc_store = ParamStore::new(0);
        let disc = PatchDiscriminator::new(&disc_store.root(), 4).unwrap();
        let l = autoencoder_losses(&ae, &x, &feats, Some(&disc)).unwrap();
        assert!(l.perceptual.is_none() && l.adversarial.is_none());
        let total = l.total.to_scalar::<f32>().unwrap();
        let sum = l.reconstruction.to_scalar::<f32>().unwrap() + l.commitment.to_scalar::<f32>().unwrap();
        assert_eq!(total, sum);
    }

    #[test]
    fn hinge_loss_fixture() {
        let r = Tensor::new(&[2.0f32, 0.5], &Device::Cpu).unwrap();
        let f = Tensor::new(&[-2.0f32, 0.0], &Device::Cpu).unwrap();
        // real: relu(-1)=0, relu(0.5)=0.5 -> 0.25 ; fake: relu(-1)=0, relu(1)=1 -> 0.5
        let l = hinge_d_loss(&r, &f).unwrap().to_scalar::<f32>().unwrap();
        assert!((l - 0.75).abs() < 1e-6);
    }

    #[test]
    fn config_rejects_bad_factor() {
        let cfg = AutoencoderConfig {
            downsample_factor: 8,
            ..tiny_config()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn short_training_improves_and_checkpoints() {
        let imgs = toy_images(10);
        let (train, val) = imgs.split_at(32);
        let train: Vec<&GrayImage> = train.iter().collect();
        let val: Vec<&GrayImage> = val.iter().collect();
        let out = train_autoencoder(&train, &val, &tiny_config(), 3, 9).unwrap();
        assert_eq!(out.history.len(), 3);
        let first = out.history[0].val_reconstruction;
        assert!(out.best_val_reconstruction <= first);
        assert!(out.model.latent_scale.is_finite() && out.model.latent_scale > 0.0);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.ckpt");
        out.model.save(&path, out.best_epoch, out.best_val_reconstruction).unwrap();
        let back = Autoencoder::load(&path).unwrap();
        assert_eq!(back.latent_scale, out.model.latent_scale);
        assert_eq!(back.encode(&[val[0]]).unwrap(), out.model.encode(&[val[0]]).unwrap());
    }
}
