//! Procedural desk-scale corpus: grayscale "radiographs" with a shared
//! anatomy template, a per-patient identity texture, and per-class bright
//! geometric opacities.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::classes::{class_index, metadata_label, NO_FINDING, NUM_CLASSES};
use crate::error::{ConfigIssue, Error, Result};
use crate::image_io::{save_png, GrayImage};
use crate::seeds::{derive_seed, rng_from_seed};

/// Side of the coarse random grid behind each identity texture.
const SIGNATURE_GRID: usize = 5;
const SIGNATURE_AMPLITUDE: f32 = 0.16;
const PATTERN_AMPLITUDE: f32 = 0.35;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySpec {
    pub num_patients: usize,
    pub images_per_patient: usize,
    pub classes: Vec<String>,
    pub image_size: usize,
    pub identity_signature_strength: f32,
    pub class_pattern_strength: f32,
    pub noise_std: f32,
    /// Fraction of images given a second label, to exercise curation.
    pub multi_label_fraction: f64,
    pub min_age: u32,
    pub max_age: u32,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            num_patients: 50,
            images_per_patient: 4,
            classes: vec!["Effusion".into(), "Mass".into()],
            image_size: 32,
            identity_signature_strength: 0.8,
            class_pattern_strength: 1.0,
            noise_std: 0.02,
            multi_label_fraction: 0.0,
            min_age: 10,
            max_age: 80,
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn issues(&self, prefix: &str) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut bad = |f: &str, m: &str| out.push(ConfigIssue::new(format!("{prefix}{f}"), m));
        if self.num_patients == 0 {
            bad("num_patients", "must be positive");
        }
        if self.images_per_patient == 0 {
            bad("images_per_patient", "must be at least 1");
        }
        if self.classes.len() < 2 {
            bad("classes", "need at least 2 classes");
        }
        if self.classes.iter().any(|c| class_index(c).is_none()) {
            bad("classes", "unknown class name");
        }
        if self.image_size < 8 {
            bad("image_size", "must be at least 8");
        }
        if !(0.0..=1.0).contains(&self.identity_signature_strength) {
            bad("identity_signature_strength", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.class_pattern_strength) {
            bad("class_pattern_strength", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.multi_label_fraction) {
            bad("multi_label_fraction", "must lie in [0, 1]");
        }
        if self.min_age > self.max_age {
            bad("min_age", "must not exceed max_age");
        }
        out
    }

    fn class_indices(&self) -> Vec<usize> {
        self.classes
            .iter()
            .map(|c| class_index(c).expect("validated"))
            .collect()
    }
}

/// One generated image and its metadata row.
#[derive(Debug, Clone)]
pub struct ToySample {
    pub image_id: String,
    pub patient_id: String,
    pub follow_up_index: u32,
    pub patient_age: u32,
    pub labels: Vec<usize>,
    pub image: GrayImage,
}

/// A patient's identity texture, zero-mean, roughly unit scale.
#[derive(Debug, Clone)]
pub struct Signature {
    size: usize,
    values: Vec<f32>,
}

impl Signature {
    pub fn random(size: usize, rng: &mut impl Rng) -> Self {
        let g = SIGNATURE_GRID;
        let grid: Vec<f32> = (0..g * g).map(|_| StandardNormal.sample(rng)).collect();
        let mut values = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                // bilinear interpolation of the coarse grid
                let fy = (y as f32 + 0.5) / size as f32 * (g - 1) as f32;
                let fx = (x as f32 + 0.5) / size as f32 * (g - 1) as f32;
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(g - 1), (x0 + 1).min(g - 1));
                let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
                let v = grid[y0 * g + x0] * (1.0 - ty) * (1.0 - tx)
                    + grid[y0 * g + x1] * (1.0 - ty) * tx
                    + grid[y1 * g + x0] * ty * (1.0 - tx)
                    + grid[y1 * g + x1] * ty * tx;
                values.push(v);
            }
        }
        Self { size, values }
    }

    pub fn zero(size: usize) -> Self {
        Self {
            size,
            values: vec![0.0; size * size],
        }
    }
}

fn smoothstep_inside(d: f32, softness: f32) -> f32 {
    // 1 inside (d < 1), 0 outside, smooth transition of width `softness`
    (0.5 - (d - 1.0) / softness).clamp(0.0, 1.0)
}

fn anatomy(u: f32, v: f32) -> f32 {
    let torso = {
        let d = ((u - 0.5) / 0.44).powi(2) + ((v - 0.55) / 0.47).powi(2);
        smoothstep_inside(d.sqrt(), 0.15)
    };
    let lung = |cu: f32| {
        let d = ((u - cu) / 0.15).powi(2) + ((v - 0.5) / 0.3).powi(2);
        smoothstep_inside(d.sqrt(), 0.3)
    };
    let lungs = lung(0.31).max(lung(0.69));
    0.1 + 0.35 * torso - 0.18 * lungs
}

/// Mask in `[0, 1]` of the opacity planted for `class`.
pub fn pattern_mask(class: usize, size: usize) -> Vec<f32> {
    let mut out = vec![0.0; size * size];
    if class == NO_FINDING || class >= NUM_CLASSES {
        return out;
    }
    // 14 positions on a 4x4 lattice inside the chest; three shape families
    let (row, col) = (class / 4, class % 4);
    let cu = 0.2 + 0.2 * col as f32;
    let cv = 0.22 + 0.19 * row as f32;
    for y in 0..size {
        for x in 0..size {
            let u = (x as f32 + 0.5) / size as f32;
            let v = (y as f32 + 0.5) / size as f32;
            let d = match class % 3 {
                0 => (((u - cu) / 0.1).powi(2) + ((v - cv) / 0.1).powi(2)).sqrt(),
                1 => ((u - cu) / 0.15).abs().max(((v - cv) / 0.06).abs()),
                _ => ((u - cu) / 0.06).abs().max(((v - cv) / 0.14).abs()),
            };
            out[y * size + x] = smoothstep_inside(d, 0.4);
        }
    }
    out
}

/// Mean intensity over the class's opacity region minus the image mean;
/// large when the class pattern is present.
pub fn pattern_statistic(img: &GrayImage, class: usize) -> f64 {
    let mask = pattern_mask(class, img.size());
    let (mut inside, mut n_in) = (0.0f64, 0usize);
    for (p, m) in img.pixels().iter().zip(&mask) {
        if *m > 0.5 {
            inside += *p as f64;
            n_in += 1;
        }
    }
    let mean_all = img.pixels().iter().map(|&p| p as f64).sum::<f64>() / img.pixels().len() as f64;
    if n_in == 0 {
        return 0.0;
    }
    inside / n_in as f64 - mean_all
}

/// Renders one image from its components.
pub fn render_image(
    spec: &ToySpec,
    signature: &Signature,
    labels: &[usize],
    rng: &mut impl Rng,
) -> GrayImage {
    let s = spec.image_size;
    debug_assert_eq!(signature.size, s);
    let masks: Vec<Vec<f32>> = labels.iter().map(|&c| pattern_mask(c, s)).collect();
    let mut px = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            let u = (x as f32 + 0.5) / s as f32;
            let v = (y as f32 + 0.5) / s as f32;
            let mut p = anatomy(u, v);
            p += SIGNATURE_AMPLITUDE * spec.identity_signature_strength * signature.values[i];
            let pattern = masks.iter().map(|m| m[i]).fold(0.0f32, f32::max);
            p += PATTERN_AMPLITUDE * spec.class_pattern_strength * pattern;
            let n: f32 = StandardNormal.sample(rng);
            p += spec.noise_std * n;
            px.push(p.clamp(0.0, 1.0));
        }
    }
    GrayImage::new(s, px).expect("size matches").quantized()
}

/// Generates the whole corpus in memory, deterministically from `spec`.
pub fn render_corpus(spec: &ToySpec) -> Result<Vec<ToySample>> {
    let issues = spec.issues("");
    if !issues.is_empty() {
        return Err(Error::Config(issues));
    }
    let classes = spec.class_indices();
    let abnormal: Vec<usize> = classes.iter().copied().filter(|&c| c != NO_FINDING).collect();
    let mut out = Vec::with_capacity(spec.num_patients * spec.images_per_patient);
    for p in 0..spec.num_patients {
        let mut prng = rng_from_seed(derive_seed(spec.seed, "toy-patient", p as u64));
        let signature = Signature::random(spec.image_size, &mut prng);
        let age = prng.random_range(spec.min_age..=spec.max_age);
        for f in 0..spec.images_per_patient {
            let mut irng = rng_from_seed(derive_seed(
                spec.seed,
                "toy-image",
                (p * spec.images_per_patient + f) as u64,
            ));
            let first = classes[irng.random_range(0..classes.len())];
            let mut labels = vec![first];
            if first != NO_FINDING && irng.random_bool(spec.multi_label_fraction) {
                let others: Vec<usize> = abnormal.iter().copied().filter(|&c| c != first).collect();
                if !others.is_empty() {
                    labels.push(others[irng.random_range(0..others.len())]);
                    labels.sort_unstable();
                }
            }
            let image = render_image(spec, &signature, &labels, &mut irng);
            out.push(ToySample {
                image_id: format!("{:08}_{:03}.png", p + 1, f),
                patient_id: format!("{}", p + 1),
                follow_up_index: f as u32,
                patient_age: age,
                labels,
                image,
            });
        }
    }
    Ok(out)
}

/// Paths produced by [`generate_toy_corpus`].
#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub metadata: PathBuf,
    pub images: PathBuf,
    pub num_images: usize,
}

pub const TOY_METADATA_FILE: &str = "metadata.csv";

/// Writes `metadata.csv` and `images/*.png` under `out_dir`.
pub fn generate_toy_corpus(spec: &ToySpec, out_dir: &Path) -> Result<ToyCorpus> {
    let samples = render_corpus(spec)?;
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let metadata = out_dir.join(TOY_METADATA_FILE);
    let mut w = csv::Writer::from_path(&metadata)?;
    w.write_record([
        "Image Index",
        "Finding Labels",
        "Follow-up #",
        "Patient ID",
        "Patient Age",
    ])?;
    for s in &samples {
        save_png(&images.join(&s.image_id), &s.image)?;
        let labels = s
            .labels
            .iter()
            .map(|&c| metadata_label(c))
            .collect::<Vec<_>>()
            .join("|");
        w.write_record([
            s.image_id.clone(),
            labels,
            s.follow_up_index.to_string(),
            s.patient_id.clone(),
            s.patient_age.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&metadata, e))?;
    Ok(ToyCorpus {
        metadata,
        images,
        num_images: samples.len(),
    })
}
