//! Patient matching: an embedding network for nearest-patient retrieval and
//! a siamese verification network scoring whether two images show the same
//! patient.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{Device, Module, Tensor, D};
use candle_nn::Optimizer;
use log::{info, warn};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::curation::ImageRecord;
use crate::error::{ConfigIssue, Error, Result};
use crate::eval::compute_auc;
use crate::image_io::{batch_tensor, load_png, GrayImage};
use crate::nn::{adam, finite_scalar, leaky_relu, sigmoid, Builder, Checkpoint, Conv2d, Linear, ParamStore};
use crate::seeds::{derive_seed, rng_from_seed};

pub const CHECKPOINT_KIND: &str = "matcher";
pub const SECTION: &str = "matcher";
pub const INDEX_MAGIC: &[u8; 4] = b"PSIX";
const INDEX_VERSION: u32 = 1;

/// Verification probabilities strictly above this exclude an image.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatcherConfig {
    pub input_size: usize,
    pub embedding_dim: usize,
    pub channels: Vec<usize>,
    /// Contrastive margin on the Euclidean distance of unit embeddings.
    pub margin: f64,
    pub verification_features: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            embedding_dim: 128,
            channels: vec![16, 32, 64],
            margin: 0.5,
            verification_features: 64,
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 32,
        }
    }
}

impl MatcherConfig {
    pub fn issues(&self, prefix: &str) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let f = |n: &str| format!("{prefix}.{n}");
        if self.channels.is_empty() || self.channels.contains(&0) {
            out.push(ConfigIssue::new(f("channels"), "must be a non-empty list of positive integers"));
        } else if self.input_size % (1 << self.channels.len()) != 0 {
            out.push(ConfigIssue::new(
                f("input_size"),
                format!("must be divisible by 2^{}", self.channels.len()),
            ));
        }
        for (name, v) in [
            ("input_size", self.input_size),
            ("embedding_dim", self.embedding_dim),
            ("verification_features", self.verification_features),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                out.push(ConfigIssue::new(f(name), "must be positive"));
            }
        }
        if !(self.margin > 0.0) {
            out.push(ConfigIssue::new(f("margin"), "must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            out.push(ConfigIssue::new(f("learning_rate"), "must be positive"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues("matcher");
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }
}

/// Strided convolution trunk ending in a dense projection.
#[derive(Debug, Clone)]
struct Trunk {
    convs: Vec<Conv2d>,
    dense: Linear,
}

impl Trunk {
    fn new(b: &Builder, cfg: &MatcherConfig, out_dim: usize) -> Result<Self> {
        let mut convs = Vec::new();
        let mut prev = 1;
        for (i, &c) in cfg.channels.iter().enumerate() {
            convs.push(Conv2d::new(&b.pp(format!("conv{i}")), prev, c, 3, 1, 2)?);
            prev = c;
        }
        let side = cfg.input_size >> cfg.channels.len();
        Ok(Self {
            convs,
            dense: Linear::new(&b.pp("dense"), prev * side * side, out_dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = standardize(x)?;
        for c in &self.convs {
            h = leaky_relu(&c.forward(&h)?, 0.2)?;
        }
        Ok(self.dense.forward(&h.flatten_from(1)?)?)
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

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

#[derive(Debug, Clone)]
struct Verifier {
    trunk: Trunk,
    hidden: Linear,
    out: Linear,
}

impl Verifier {
    fn new(b: &Builder, cfg: &MatcherConfig) -> Result<Self> {
        let f = cfg.verification_features;
        Ok(Self {
            trunk: Trunk::new(&b.pp("trunk"), cfg, f)?,
            hidden: Linear::new(&b.pp("hidden"), f, f)?,
            out: Linear::new(&b.pp("out"), f, 1)?,
        })
    }

    /// Same-patient logit from the absolute feature difference.
    fn logits(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let fa = self.trunk.forward(a)?;
        let fb = self.trunk.forward(b)?;
        let h = leaky_relu(&self.hidden.forward(&(fa - fb)?.abs()?)?, 0.2)?;
        Ok(self.out.forward(&h)?.squeeze(1)?)
    }
}

/// Retrieval and verification networks.
#[derive(Debug)]
pub struct PatientMatcher {
    pub config: MatcherConfig,
    store: ParamStore,
    retrieval: Trunk,
    verifier: Verifier,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SectionMeta {
    config: MatcherConfig,
    metrics: Option<MatcherMetrics>,
}

impl PatientMatcher {
    pub fn new(config: &MatcherConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed);
        let retrieval = Trunk::new(&store.root().pp("retrieval"), config, config.embedding_dim)?;
        let verifier = Verifier::new(&store.root().pp("verification"), config)?;
        Ok(Self {
            config: config.clone(),
            store,
            retrieval,
            verifier,
        })
    }

    fn batch(&self, images: &[&GrayImage]) -> Result<Tensor> {
        let s = self.config.input_size;
        let resized: Vec<GrayImage>;
        let refs: Vec<&GrayImage> = if images.iter().all(|i| i.size() == s) {
            images.to_vec()
        } else {
            resized = images.iter().map(|i| i.resized(s)).collect();
            resized.iter().collect()
        };
        batch_tensor(&refs, &Device::Cpu)
    }

    /// Unit-norm retrieval embeddings, one row per image.
    pub fn embed(&self, images: &[&GrayImage]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(128) {
            let e = l2_normalize(&self.retrieval.forward(&self.batch(chunk)?)?)?;
            out.extend(e.to_vec2::<f32>()?);
        }
        Ok(out)
    }

    /// Same-patient probability, averaged over both input orders.
    pub fn verify_pairs(&self, pairs: &[(&GrayImage, &GrayImage)]) -> Result<Vec<f64>> {
        let s = self.config.input_size;
        if let Some((a, b)) = pairs.iter().find(|(a, b)| a.size() != s || b.size() != s) {
            return Err(Error::Input(format!(
                "verification expects {s}x{s} images, got {}x{} and {}x{}",
                a.size(),
                a.size(),
                b.size(),
                b.size()
            )));
        }
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(128) {
            let a: Vec<&GrayImage> = chunk.iter().map(|p| p.0).collect();
            let b: Vec<&GrayImage> = chunk.iter().map(|p| p.1).collect();
            let (ta, tb) = (self.batch(&a)?, self.batch(&b)?);
            let ab: Vec<f32> = sigmoid(&self.verifier.logits(&ta, &tb)?)?.to_vec1()?;
            let ba: Vec<f32> = sigmoid(&self.verifier.logits(&tb, &ta)?)?.to_vec1()?;
            out.extend(ab.iter().zip(&ba).map(|(x, y)| (*x as f64 + *y as f64) / 2.0));
        }
        Ok(out)
    }

    pub fn verify_pair(&self, a: &GrayImage, b: &GrayImage) -> Result<f64> {
        Ok(self.verify_pairs(&[(a, b)])?[0])
    }

    pub fn save(&self, path: &Path, metrics: Option<&MatcherMetrics>) -> Result<()> {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND);
        ck.add_section(
            SECTION,
            &SectionMeta {
                config: self.config.clone(),
                metrics: metrics.cloned(),
            },
            &self.store,
        )?;
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load_kind(path, CHECKPOINT_KIND)?;
        let meta: SectionMeta = ck.section_meta(SECTION)?;
        let m = Self::new(&meta.config, 0)?;
        ck.load_into(SECTION, &m.store)?;
        Ok(m)
    }
}

/// Held-out matcher quality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatcherMetrics {
    /// Share of queries whose nearest other image belongs to the same patient.
    pub top1_precision: f64,
    pub verification_auc: f64,
    pub num_images: usize,
    pub num_pairs: usize,
}

pub struct TrainedMatcher {
    pub matcher: PatientMatcher,
    pub history: Vec<f64>,
    pub validation: Option<MatcherMetrics>,
}

/// An image with its patient.
#[derive(Debug, Clone, Copy)]
pub struct PatientImage<'a> {
    pub patient_id: &'a str,
    pub image: &'a GrayImage,
}

fn group_by_patient(items: &[PatientImage]) -> BTreeMap<String, Vec<usize>> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        groups.entry(it.patient_id.to_string()).or_default().push(i);
    }
    groups
}

/// Trains both networks on `(anchor, same patient, other patient)` triples
/// drawn afresh every epoch: contrastive loss for retrieval, binary
/// cross-entropy for verification.
pub fn train_matcher(
    train: &[PatientImage],
    validation: &[PatientImage],
    config: &MatcherConfig,
    seed: u64,
) -> Result<TrainedMatcher> {
    config.validate()?;
    let groups = group_by_patient(train);
    let multi: Vec<&Vec<usize>> = groups.values().filter(|g| g.len() >= 2).collect();
    if groups.len() < 2 || multi.len() < 2 {
        return Err(Error::Training(
            "matcher training needs at least 2 patients with 2 or more images each".into(),
        ));
    }
    let matcher = PatientMatcher::new(config, derive_seed(seed, "matcher-init", 0))?;
    let images: Vec<&GrayImage> = train.iter().map(|p| p.image).collect();
    let all = matcher.batch(&images)?;
    let patient_of: Vec<&str> = train.iter().map(|p| p.patient_id).collect();
    let anchors: Vec<usize> = groups.values().filter(|g| g.len() >= 2).flatten().copied().collect();

    let mut opt = adam(matcher.store.trainable(), config.learning_rate, 0.9, 0.999)?;
    let mut rng = rng_from_seed(derive_seed(seed, "matcher-pairs", 0));
    let mut history = Vec::with_capacity(config.epochs);
    let device = Device::Cpu;
    for epoch in 0..config.epochs {
        let mut order = anchors.clone();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut total = 0.0;
        let mut nb = 0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut pos = Vec::with_capacity(chunk.len());
            let mut neg = Vec::with_capacity(chunk.len());
            for &a in chunk {
                let same = &groups[patient_of[a]];
                let choices: Vec<usize> = same.iter().copied().filter(|&j| j != a).collect();
                pos.push(*choices.choose(&mut rng).expect("anchor has a partner"));
                loop {
                    let j = rng.random_range(0..train.len());
                    if patient_of[j] != patient_of[a] {
                        neg.push(j);
                        break;
                    }
                }
            }
            let pick = |idx: &[usize]| -> Result<Tensor> {
                Ok(all.index_select(&crate::nn::ids_tensor(idx, &device)?, 0)?)
            };
            let (xa, xp, xn) = (pick(chunk)?, pick(&pos)?, pick(&neg)?);

            let ea = l2_normalize(&matcher.retrieval.forward(&xa)?)?;
            let ep = l2_normalize(&matcher.retrieval.forward(&xp)?)?;
            let en = l2_normalize(&matcher.retrieval.forward(&xn)?)?;
            let d_pos = (ea.clone() - ep)?.sqr()?.sum(1)?;
            let d_neg = ((ea - en)?.sqr()?.sum(1)? + 1e-9)?.sqrt()?;
            let hinge = (config.margin - d_neg)?.relu()?.sqr()?;
            let contrastive = ((d_pos.mean_all()? + hinge.mean_all()?)? * 0.5)?;

            let lp = matcher.verifier.logits(&xa, &xp)?;
            let ln = matcher.verifier.logits(&xa, &xn)?;
            // -log sigmoid(l) = softplus(-l); -log(1 - sigmoid(l)) = softplus(l)
            let softplus = |t: &Tensor| -> Result<Tensor> { Ok((t.exp()? + 1.0)?.log()?) };
            let bce = ((softplus(&lp.neg()?)?.mean_all()? + softplus(&ln)?.mean_all()?)? * 0.5)?;

            let loss = (contrastive + bce)?;
            total += finite_scalar(&loss, "matcher", epoch, bi)?;
            nb += 1;
            opt.backward_step(&loss)?;
        }
        let mean = total / nb as f64;
        info!("matcher epoch {epoch}: loss {mean:.4}");
        history.push(mean);
    }
    let validation = if validation.is_empty() {
        None
    } else {
        match evaluate_matcher(&matcher, validation, derive_seed(seed, "matcher-eval", 0)) {
            Ok(m) => Some(m),
            Err(e) => {
                warn!("matcher validation skipped: {e}");
                None
            }
        }
    };
    Ok(TrainedMatcher {
        matcher,
        history,
        validation,
    })
}

/// Top-1 precision (each image queried against all others) and verification
/// AUC over every same-patient pair plus as many random different-patient
/// pairs.
pub fn evaluate_matcher(matcher: &PatientMatcher, items: &[PatientImage], seed: u64) -> Result<MatcherMetrics> {
    let groups = group_by_patient(items);
    let images: Vec<&GrayImage> = items.iter().map(|p| p.image).collect();
    let emb = matcher.embed(&images)?;
    let mut hits = 0usize;
    let mut queries = 0usize;
    for (i, q) in emb.iter().enumerate() {
        if groups[items[i].patient_id].len() < 2 {
            continue;
        }
        let best = emb
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, e)| (j, dot(q, e)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(j, _)| j);
        if let Some(j) = best {
            queries += 1;
            hits += usize::from(items[j].patient_id == items[i].patient_id);
        }
    }
    if queries == 0 {
        return Err(Error::Input("no patient has two evaluation images".into()));
    }
    let mut pairs = Vec::new();
    for g in groups.values() {
        for (a, &i) in g.iter().enumerate() {
            for &j in &g[a + 1..] {
                pairs.push((i, j, true));
            }
        }
    }
    let n_pos = pairs.len();
    let mut rng = rng_from_seed(seed);
    let mut n_neg = 0;
    while n_neg < n_pos {
        let (i, j) = (rng.random_range(0..items.len()), rng.random_range(0..items.len()));
        if items[i].patient_id != items[j].patient_id {
            pairs.push((i, j, false));
            n_neg += 1;
        }
    }
    let refs: Vec<(&GrayImage, &GrayImage)> = pairs.iter().map(|&(i, j, _)| (items[i].image, items[j].image)).collect();
    let probs = matcher.verify_pairs(&refs)?;
    let labels: Vec<bool> = pairs.iter().map(|p| p.2).collect();
    Ok(MatcherMetrics {
        top1_precision: hits as f64 / queries as f64,
        verification_auc: compute_auc(&probs, &labels)?,
        num_images: items.len(),
        num_pairs: pairs.len(),
    })
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Immutable map from real image id to retrieval embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<f32>,
}

impl RetrievalIndex {
    pub fn new(dim: usize, entries: Vec<(String, Vec<f32>)>) -> Result<Self> {
        let mut ids = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len() * dim);
        for (id, v) in entries {
            if v.len() != dim {
                return Err(Error::Input(format!("embedding for {id} has {} entries, expected {dim}", v.len())));
            }
            let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            if !(norm > 0.0) {
                return Err(Error::Input(format!("embedding for {id} has zero norm")));
            }
            ids.push(id);
            vectors.extend(v.iter().map(|x| (*x as f64 / norm) as f32));
        }
        Ok(Self { dim, ids, vectors })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Entry with the highest cosine similarity; ties go to the
    /// lexicographically smallest id.
    pub fn nearest(&self, query: &[f32]) -> Result<(&str, f64)> {
        if self.is_empty() {
            return Err(Error::Input("retrieval index is empty".into()));
        }
        if query.len() != self.dim {
            return Err(Error::Input(format!("query has {} entries, index has {}", query.len(), self.dim)));
        }
        let qn = query.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.len() {
            let s = dot(query, self.vector(i)) / qn;
            best = match best {
                Some((b, bs)) if bs > s || (bs == s && self.ids[b] <= self.ids[i]) => Some((b, bs)),
                _ => Some((i, s)),
            };
        }
        let (i, s) = best.expect("non-empty index");
        Ok((&self.ids[i], s))
    }

    /// `PSIX` magic, version, dimension, count, length-prefixed UTF-8 ids,
    /// then row-major little-endian f32 vectors.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.vectors.len() * 4);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("retrieval index: {m}"));
        let mut take = |n: usize| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            bytes.read_exact(&mut buf).map_err(|_| bad("truncated file"))?;
            Ok(buf)
        };
        if take(4)? != INDEX_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |b: Vec<u8>| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let version = u32_at(take(4)?);
        if version != INDEX_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let dim = u32_at(take(4)?) as usize;
        let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u32_at(take(4)?) as usize;
            ids.push(String::from_utf8(take(len)?).map_err(|_| bad("id is not UTF-8"))?);
        }
        let raw = take(count * dim * 4)?;
        let vectors = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { dim, ids, vectors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Builds the index from in-memory images.
pub fn index_images(matcher: &PatientMatcher, ids: &[String], images: &[&GrayImage]) -> Result<RetrievalIndex> {
    let emb = matcher.embed(images)?;
    RetrievalIndex::new(matcher.config.embedding_dim, ids.iter().cloned().zip(emb).collect())
}

/// Indexes every readable record; unreadable images are skipped and their
/// ids returned.
pub fn build_retrieval_index(matcher: &PatientMatcher, records: &[ImageRecord]) -> Result<(RetrievalIndex, Vec<String>)> {
    let mut ids = Vec::new();
    let mut images = Vec::new();
    let mut missing = Vec::new();
    for r in records {
        match load_png(&r.image_path, matcher.config.input_size) {
            Ok(img) => {
                ids.push(r.image_id.clone());
                images.push(img);
            }
            Err(e) => {
                warn!("index: skipping {}: {e}", r.image_id);
                missing.push(r.image_id.clone());
            }
        }
    }
    let refs: Vec<&GrayImage> = images.iter().collect();
    Ok((index_images(matcher, &ids, &refs)?, missing))
}

/// Top-1 retrieval for a query image.
pub fn retrieve_top1<'a>(matcher: &PatientMatcher, index: &'a RetrievalIndex, query: &GrayImage) -> Result<(&'a str, f64)> {
    if index.is_empty() {
        return Err(Error::Input("retrieval index is empty".into()));
    }
    let e = matcher.embed(&[query])?;
    index.nearest(&e[0])
}
