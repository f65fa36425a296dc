//! Multi-label abnormality classifier: a densely connected network with one
//! sigmoid output per abnormality, trained by SGD on class-wise binary
//! cross-entropy with learning-rate decay and early stopping on the
//! validation loss.

use std::collections::BTreeSet;
use std::path::Path;

use candle_core::{Device, Module, Tensor};
use log::info;
use serde::{Deserialize, Serialize};

use crate::classes::{NO_FINDING, NUM_ABNORMALITIES};
use crate::curation::ImageRecord;
use crate::error::{ConfigIssue, Error, Result};
use crate::image_io::{batch_tensor, load_png, GrayImage};
use crate::nn::{
    avg_pool2x, finite_scalar, ids_tensor, ordered_batches, shuffled_batches, BatchNorm, Builder, Checkpoint,
    Conv2d, Linear, ParamStore, SgdMomentum,
};
use crate::seeds::{derive_seed, rng_from_seed};

pub const CHECKPOINT_KIND: &str = "classifier";
pub const SECTION: &str = "classifier";

pub type PredictionVector = [f32; NUM_ABNORMALITIES];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthPreset {
    /// Blocks of 6, 12, 24 and 16 layers, growth 32.
    Reference121,
    /// Four blocks of 3 layers, growth 12, behind a stride-2 stem.
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub input_size: usize,
    pub num_outputs: usize,
    pub depth_preset: DepthPreset,
    pub lr_initial: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ClassifierConfig {
    pub fn toy() -> Self {
        Self {
            input_size: 32,
            num_outputs: NUM_ABNORMALITIES,
            depth_preset: DepthPreset::Toy,
            lr_initial: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_factor: 10.0,
            patience: 3,
            batch_size: 32,
            max_epochs: 30,
        }
    }

    pub fn reference() -> Self {
        Self {
            input_size: 224,
            depth_preset: DepthPreset::Reference121,
            batch_size: 32,
            max_epochs: 100,
            ..Self::toy()
        }
    }

    pub fn issues(&self, prefix: &str) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let f = |n: &str| format!("{prefix}.{n}");
        if self.num_outputs != NUM_ABNORMALITIES {
            out.push(ConfigIssue::new(
                f("num_outputs"),
                format!("must equal the {NUM_ABNORMALITIES} abnormality classes"),
            ));
        }
        let min = match self.depth_preset {
            DepthPreset::Toy => 16,
            DepthPreset::Reference121 => 32,
        };
        if self.input_size < min || self.input_size % min != 0 {
            out.push(ConfigIssue::new(
                f("input_size"),
                format!("must be a positive multiple of {min} for this depth preset"),
            ));
        }
        if !(self.lr_initial > 0.0) {
            out.push(ConfigIssue::new(f("lr_initial"), "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            out.push(ConfigIssue::new(f("momentum"), "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            out.push(ConfigIssue::new(f("weight_decay"), "must be non-negative"));
        }
        if !(self.lr_decay_factor > 1.0) {
            out.push(ConfigIssue::new(f("lr_decay_factor"), "must exceed 1"));
        }
        for (name, v) in [
            ("patience", self.patience),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
        ] {
            if v == 0 {
                out.push(ConfigIssue::new(f(name), "must be positive"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues("classifier");
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }
}

/// 14-dim multi-hot target; No Finding contributes nothing.
pub fn target_vector(labels: &BTreeSet<usize>) -> PredictionVector {
    let mut t = [0.0; NUM_ABNORMALITIES];
    for &c in labels {
        if c != NO_FINDING && c < NUM_ABNORMALITIES {
            t[c] = 1.0;
        }
    }
    t
}

/// Mean over samples and classes of `-(y ln p + (1 - y) ln(1 - p))`.
pub fn binary_cross_entropy(probs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    if probs.is_empty() || probs.len() != targets.len() {
        return Err(Error::Input("need matching, non-empty prediction and target lists".into()));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (p, y) in probs.iter().zip(targets) {
        if p.len() != y.len() {
            return Err(Error::Input("prediction and target widths differ".into()));
        }
        for (&p, &y) in p.iter().zip(y) {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Input(format!("probability {p} outside [0, 1]")));
            }
            // 0 ln 0 = 0
            let xlogy = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * b.ln() };
            total -= xlogy(y, p) + xlogy(1.0 - y, 1.0 - p);
            n += 1;
        }
    }
    Ok(total / n as f64)
}

/// Same loss from logits, computed stably as `softplus(z) - y z`.
fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let softplus = (logits.relu()? + ((logits.abs()?.neg()?.exp()? + 1.0)?.log()?))?;
    Ok((softplus - (logits * targets)?)?.mean_all()?)
}

/// Reduce-on-plateau schedule with early stopping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlateauAction {
    Improved,
    Decayed,
    Stop,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Records an epoch's validation loss. Any non-improving epoch divides
    /// the rate by `factor`; the `patience`-th consecutive one stops.
    pub fn step(&mut self, val_loss: f64) -> PlateauAction {
        if self.best.is_none_or(|b| val_loss < b) {
            self.best = Some(val_loss);
            self.bad_epochs = 0;
            return PlateauAction::Improved;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            return PlateauAction::Stop;
        }
        self.lr /= self.factor;
        PlateauAction::Decayed
    }
}

#[derive(Debug, Clone)]
struct DenseLayer {
    norm1: BatchNorm,
    conv1: Conv2d,
    norm2: BatchNorm,
    conv2: Conv2d,
}

impl DenseLayer {
    fn new(b: &Builder, c_in: usize, growth: usize) -> Result<Self> {
        let inner = 4 * growth;
        Ok(Self {
            norm1: BatchNorm::new(&b.pp("norm1"), c_in)?,
            conv1: Conv2d::new(&b.pp("conv1"), c_in, inner, 1, 0, 1)?,
            norm2: BatchNorm::new(&b.pp("norm2"), inner)?,
            conv2: Conv2d::new(&b.pp("conv2"), inner, growth, 3, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward_t(x, train)?.relu()?)?;
        let h = self.conv2.forward(&self.norm2.forward_t(&h, train)?.relu()?)?;
        Ok(Tensor::cat(&[x, &h], 1)?)
    }
}

#[derive(Debug, Clone)]
struct Transition {
    norm: BatchNorm,
    conv: Conv2d,
}

#[derive(Debug, Clone)]
struct DenseNet {
    stem: Conv2d,
    stem_norm: Option<BatchNorm>,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    final_norm: BatchNorm,
    head: Linear,
}

impl DenseNet {
    fn new(b: &Builder, cfg: &ClassifierConfig) -> Result<Self> {
        let (layers, growth, init, reference): (&[usize], usize, usize, bool) = match cfg.depth_preset {
            DepthPreset::Reference121 => (&[6, 12, 24, 16], 32, 64, true),
            DepthPreset::Toy => (&[3, 3, 3, 3], 12, 24, false),
        };
        let (stem, stem_norm) = if reference {
            (
                Conv2d::new(&b.pp("stem"), 1, init, 7, 3, 2)?,
                Some(BatchNorm::new(&b.pp("stem_norm"), init)?),
            )
        } else {
            (Conv2d::new(&b.pp("stem"), 1, init, 3, 1, 2)?, None)
        };
        let mut c = init;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (bi, &n) in layers.iter().enumerate() {
            let mut block = Vec::new();
            for li in 0..n {
                block.push(DenseLayer::new(&b.pp(format!("block{bi}.layer{li}")), c, growth)?);
                c += growth;
            }
            blocks.push(block);
            if bi + 1 < layers.len() {
                let tb = b.pp(format!("transition{bi}"));
                transitions.push(Transition {
                    norm: BatchNorm::new(&tb.pp("norm"), c)?,
                    conv: Conv2d::new(&tb.pp("conv"), c, c / 2, 1, 0, 1)?,
                });
                c /= 2;
            }
        }
        Ok(Self {
            stem,
            stem_norm,
            blocks,
            transitions,
            final_norm: BatchNorm::new(&b.pp("final_norm"), c)?,
            head: Linear::new(&b.pp("head"), c, cfg.num_outputs)?,
        })
    }

    fn logits(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = self.stem.forward(&standardize(x)?)?;
        if let Some(n) = &self.stem_norm {
            h = n.forward_t(&h, train)?.relu()?.max_pool2d(2)?;
        }
        for (i, block) in self.blocks.iter().enumerate() {
            for layer in block {
                h = layer.forward(&h, train)?;
            }
            if let Some(t) = self.transitions.get(i) {
                h = avg_pool2x(&t.conv.forward(&t.norm.forward_t(&h, train)?.relu()?)?)?;
            }
        }
        let h = self.final_norm.forward_t(&h, train)?.relu()?.mean(3)?.mean(2)?;
        Ok(self.head.forward(&h)?)
    }
}

/// Per-image zero mean, unit variance.
fn standardize(x: &Tensor) -> Result<Tensor> {
    let flat = x.flatten_from(1)?;
    let mean = flat.mean_keepdim(1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let std = (centered.sqr()?.mean_keepdim(1)? + 1e-6)?.sqrt()?;
    Ok(centered.broadcast_div(&std)?.reshape(x.dims())?)
}

#[derive(Debug)]
pub struct Classifier {
    pub config: ClassifierConfig,
    store: ParamStore,
    net: DenseNet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SectionMeta {
    config: ClassifierConfig,
    best_epoch: usize,
    best_val_loss: f64,
}

impl Classifier {
    pub fn new(config: &ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed);
        let net = DenseNet::new(&store.root().pp("densenet"), config)?;
        Ok(Self {
            config: config.clone(),
            store,
            net,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    fn batch(&self, images: &[&GrayImage]) -> Result<Tensor> {
        let s = self.config.input_size;
        if let Some(bad) = images.iter().find(|i| i.size() != s) {
            return Err(Error::Input(format!(
                "classifier expects {s}x{s} images, got {}x{}",
                bad.size(),
                bad.size()
            )));
        }
        batch_tensor(images, &Device::Cpu)
    }

    pub fn predict_batch(&self, images: &[&GrayImage]) -> Result<Vec<PredictionVector>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let probs = candle_nn::ops::sigmoid(&self.net.logits(&self.batch(chunk)?, false)?)?;
            for row in probs.to_vec2::<f32>()? {
                out.push(row.try_into().expect("14 outputs"));
            }
        }
        Ok(out)
    }

    pub fn predict(&self, image: &GrayImage) -> Result<PredictionVector> {
        Ok(self.predict_batch(&[image])?.remove(0))
    }

    pub fn save(&self, path: &Path, best_epoch: usize, best_val_loss: f64) -> Result<()> {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND);
        ck.add_section(
            SECTION,
            &SectionMeta {
                config: self.config.clone(),
                best_epoch,
                best_val_loss,
            },
            &self.store,
        )?;
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load_kind(path, CHECKPOINT_KIND)?;
        let meta: SectionMeta = ck.section_meta(SECTION)?;
        let c = Self::new(&meta.config, 0)?;
        ck.load_into(SECTION, &c.store)?;
        Ok(c)
    }
}

/// A training or evaluation image with its labels.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: GrayImage,
    pub labels: BTreeSet<usize>,
}

/// Loads catalog images at `size`.
pub fn load_labeled(records: &[ImageRecord], size: usize) -> Result<Vec<LabeledImage>> {
    records
        .iter()
        .map(|r| {
            Ok(LabeledImage {
                image: load_png(&r.image_path, size)?,
                labels: r.labels.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub struct TrainedClassifier {
    pub classifier: Classifier,
    pub log: Vec<ClassifierEpoch>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

fn targets_tensor(items: &[&LabeledImage]) -> Result<Tensor> {
    let data: Vec<f32> = items.iter().flat_map(|i| target_vector(&i.labels)).collect();
    Ok(Tensor::from_vec(data, (items.len(), NUM_ABNORMALITIES), &Device::Cpu)?)
}

fn validation_loss(c: &Classifier, x: &Tensor, y: &Tensor) -> Result<f64> {
    let n = x.dim(0)?;
    let mut total = 0.0;
    for idx in ordered_batches(n, 64) {
        let ids = ids_tensor(&idx, &Device::Cpu)?;
        let logits = c.net.logits(&x.index_select(&ids, 0)?, false)?;
        let loss = bce_with_logits(&logits, &y.index_select(&ids, 0)?)?;
        total += loss.to_scalar::<f32>()? as f64 * idx.len() as f64;
    }
    Ok(total / n as f64)
}

/// SGD training with plateau decay and early stopping; returns the state
/// with the lowest validation loss.
pub fn train_classifier(
    train: &[LabeledImage],
    val: &[LabeledImage],
    config: &ClassifierConfig,
    seed: u64,
) -> Result<TrainedClassifier> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("classifier training needs non-empty train and validation sets".into()));
    }
    let classifier = Classifier::new(config, derive_seed(seed, "classifier-init", 0))?;
    let train_refs: Vec<&LabeledImage> = train.iter().collect();
    let val_refs: Vec<&LabeledImage> = val.iter().collect();
    let xt = classifier.batch(&train_refs.iter().map(|i| &i.image).collect::<Vec<_>>())?;
    let yt = targets_tensor(&train_refs)?;
    let xv = classifier.batch(&val_refs.iter().map(|i| &i.image).collect::<Vec<_>>())?;
    let yv = targets_tensor(&val_refs)?;

    let mut opt = SgdMomentum::new(classifier.store.trainable(), config.lr_initial, config.momentum, config.weight_decay);
    let mut schedule = PlateauSchedule::new(config.lr_initial, config.lr_decay_factor, config.patience);
    let mut rng = rng_from_seed(derive_seed(seed, "classifier-batches", 0));
    let mut log = Vec::new();
    let mut best = None;
    for epoch in 0..config.max_epochs {
        let lr = schedule.lr;
        opt.set_learning_rate(lr);
        let mut total = 0.0;
        let batches = shuffled_batches(train.len(), config.batch_size, &mut rng);
        for (bi, idx) in batches.iter().enumerate() {
            // a single-sample batch has no batch statistics
            if idx.len() < 2 {
                continue;
            }
            let ids = ids_tensor(idx, &Device::Cpu)?;
            let logits = classifier.net.logits(&xt.index_select(&ids, 0)?, true)?;
            let loss = bce_with_logits(&logits, &yt.index_select(&ids, 0)?)?;
            total += finite_scalar(&loss, "classifier", epoch, bi)? * idx.len() as f64;
            opt.backward_step(&loss)?;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = validation_loss(&classifier, &xv, &yv)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                stage: "classifier validation".into(),
                epoch,
                batch: 0,
            });
        }
        info!("classifier epoch {epoch}: lr {lr} train {train_loss:.4} val {val_loss:.4}");
        log.push(ClassifierEpoch {
            epoch,
            learning_rate: lr,
            train_loss,
            val_loss,
        });
        match schedule.step(val_loss) {
            PlateauAction::Improved => best = Some((epoch, val_loss, classifier.store.snapshot()?)),
            PlateauAction::Decayed => {}
            PlateauAction::Stop => {
                info!("classifier early stop at epoch {epoch}");
                break;
            }
        }
    }
    let (best_epoch, best_val_loss, snap) = best.expect("first epoch always improves");
    classifier.store.restore(&snap)?;
    Ok(TrainedClassifier {
        classifier,
        log,
        best_epoch,
        best_val_loss,
    })
}
