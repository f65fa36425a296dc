//! Privacy-filtered sampling of anonymous datasets.
//!
//! Each synthetic candidate is matched against the real reference patients:
//! its top-1 retrieval result is verified, and the candidate is discarded
//! when the same-patient probability exceeds the threshold. Sampling repeats
//! per class until the real class counts are met.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::classes::{class_name, ClassCondition, NUM_CLASSES};
use crate::curation::{class_counts, write_catalog, DatasetSplit, ImageRecord};
use crate::diffusion::LatentDiffusion;
use crate::error::{Error, Result};
use crate::image_io::{save_png, GrayImage};
use crate::matcher::{PatientMatcher, RetrievalIndex};
use crate::pggan::Pggan;
use crate::seeds::derive_seed;

pub const DEFAULT_ATTEMPTS_FACTOR: f64 = 10.0;
pub const AUDIT_FILE: &str = "audit.csv";
pub const CATALOG_FILE: &str = "catalog.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Ldm,
    Pggan,
}

impl GeneratorKind {
    pub fn tag(self) -> &'static str {
        match self {
            GeneratorKind::Ldm => "ldm",
            GeneratorKind::Pggan => "pggan",
        }
    }
}

/// Class-conditional image source.
pub trait ImageGenerator {
    fn kind(&self) -> GeneratorKind;
    fn generate(&self, conditions: &[ClassCondition], seeds: &[u64]) -> Result<Vec<GrayImage>>;
}

impl ImageGenerator for LatentDiffusion {
    fn kind(&self) -> GeneratorKind {
        GeneratorKind::Ldm
    }

    fn generate(&self, conditions: &[ClassCondition], seeds: &[u64]) -> Result<Vec<GrayImage>> {
        self.generate_images(conditions, seeds)
    }
}

impl ImageGenerator for Pggan {
    fn kind(&self) -> GeneratorKind {
        GeneratorKind::Pggan
    }

    fn generate(&self, conditions: &[ClassCondition], seeds: &[u64]) -> Result<Vec<GrayImage>> {
        self.sample_images(conditions, seeds)
    }
}

/// Top-1 real image and same-patient probability for synthetic candidates.
pub trait MatchOracle {
    fn assess(&self, images: &[&GrayImage]) -> Result<Vec<(String, f64)>>;
}

/// Retrieval over an index of real images, then verification against the
/// retrieved image.
pub struct MatcherOracle<'a> {
    matcher: &'a PatientMatcher,
    index: &'a RetrievalIndex,
    reference: HashMap<String, GrayImage>,
}

impl<'a> MatcherOracle<'a> {
    /// `reference` must hold an image for every indexed id.
    pub fn new(matcher: &'a PatientMatcher, index: &'a RetrievalIndex, reference: HashMap<String, GrayImage>) -> Result<Self> {
        if let Some(id) = index.ids().iter().find(|id| !reference.contains_key(*id)) {
            return Err(Error::Input(format!("no reference image for indexed id {id}")));
        }
        if index.is_empty() {
            return Err(Error::Input("retrieval index is empty".into()));
        }
        Ok(Self {
            matcher,
            index,
            reference,
        })
    }
}

impl MatchOracle for MatcherOracle<'_> {
    fn assess(&self, images: &[&GrayImage]) -> Result<Vec<(String, f64)>> {
        let size = self.matcher.config.input_size;
        let resized: Vec<GrayImage> = images.iter().map(|i| if i.size() == size { (*i).clone() } else { i.resized(size) }).collect();
        let refs: Vec<&GrayImage> = resized.iter().collect();
        let emb = self.matcher.embed(&refs)?;
        let mut top = Vec::with_capacity(images.len());
        for e in &emb {
            top.push(self.index.nearest(e)?.0.to_string());
        }
        let pairs: Vec<(&GrayImage, &GrayImage)> = resized.iter().zip(&top).map(|(s, id)| (s, &self.reference[id])).collect();
        let probs = self.matcher.verify_pairs(&pairs)?;
        Ok(top.into_iter().zip(probs).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    /// Required kept images per class index.
    pub per_class_targets: BTreeMap<usize, usize>,
    /// Part of each target that forms the synthetic validation subset.
    pub validation_targets: BTreeMap<usize, usize>,
    pub threshold: f64,
    pub max_attempts_factor: f64,
    pub seed: u64,
}

impl SamplingPlan {
    pub fn total(&self) -> usize {
        self.per_class_targets.values().sum()
    }

    /// Most attempts allowed for a class target.
    pub fn budget(&self, target: usize) -> usize {
        (self.max_attempts_factor * target as f64).ceil() as usize
    }
}

/// Targets equal to the per-class counts of train plus validation.
pub fn make_plan(split: &DatasetSplit, threshold: f64, seed: u64) -> Result<SamplingPlan> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Input(format!("threshold {threshold} outside [0, 1]")));
    }
    let pool = split.train.iter().chain(&split.validation);
    let counts = class_counts(pool);
    let val_counts = class_counts(&split.validation);
    let per_class_targets: BTreeMap<usize, usize> = (0..NUM_CLASSES).filter(|&c| counts[c] > 0).map(|c| (c, counts[c])).collect();
    if per_class_targets.is_empty() {
        return Err(Error::Input("cannot plan from an empty split".into()));
    }
    let validation_targets = per_class_targets.keys().map(|&c| (c, val_counts[c])).collect();
    Ok(SamplingPlan {
        per_class_targets,
        validation_targets,
        threshold,
        max_attempts_factor: DEFAULT_ATTEMPTS_FACTOR,
        seed,
    })
}

/// Outcome of matching one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchDecision {
    pub synthetic_id: String,
    pub top1_real_id: String,
    pub same_patient_probability: f64,
    pub excluded: bool,
}

impl MatchDecision {
    /// Excluded when the probability strictly exceeds `threshold`.
    pub fn new(synthetic_id: String, top1_real_id: String, probability: f64, threshold: f64) -> Self {
        Self {
            synthetic_id,
            top1_real_id,
            same_patient_probability: probability,
            excluded: probability > threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRecord {
    pub image_id: String,
    pub class_index: usize,
    pub generator_kind: GeneratorKind,
    pub seed: u64,
    pub decision: MatchDecision,
    pub image: GrayImage,
    pub validation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub class: String,
    pub attempt: usize,
    pub seed: u64,
    pub synthetic_id: String,
    pub top1_real_id: String,
    pub probability: f64,
    pub decision: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditLog {
    pub entries: Vec<AuditEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub kept: usize,
    pub excluded: usize,
    pub exclusion_rate: f64,
}

impl AuditLog {
    pub fn summary(&self) -> AuditSummary {
        let excluded = self.entries.iter().filter(|e| e.decision == "excluded").count();
        let kept = self.entries.len() - excluded;
        AuditSummary {
            kept,
            excluded,
            exclusion_rate: if self.entries.is_empty() {
                0.0
            } else {
                excluded as f64 / (kept + excluded) as f64
            },
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub struct AnonymousDataset {
    pub records: Vec<SyntheticRecord>,
    pub audit: AuditLog,
}

/// Seed of attempt `attempt` for `class`, a pure function of the plan seed.
pub fn attempt_seed(plan_seed: u64, class: usize, attempt: usize) -> u64 {
    derive_seed(plan_seed, &format!("synthesize-class-{class}"), attempt as u64)
}

/// Generates, matches and filters until every class target is met. Fails
/// with [`Error::BudgetExhausted`] when a class needs more than
/// `max_attempts_factor * target` attempts.
pub fn sample_anonymous_dataset(
    plan: &SamplingPlan,
    generator: &dyn ImageGenerator,
    oracle: &dyn MatchOracle,
    batch_size: usize,
) -> Result<AnonymousDataset> {
    let kind = generator.kind();
    let mut records = Vec::with_capacity(plan.total());
    let mut audit = AuditLog::default();
    for (&class, &target) in &plan.per_class_targets {
        let condition = ClassCondition::new(class)?;
        let budget = plan.budget(target);
        let n_val = plan.validation_targets.get(&class).copied().unwrap_or(0);
        let (mut kept, mut attempts) = (0usize, 0usize);
        while kept < target {
            if attempts >= budget {
                return Err(Error::BudgetExhausted {
                    class: class_name(class).to_string(),
                    achieved: kept,
                    target,
                });
            }
            // never more candidates than could still be kept
            let k = batch_size.max(1).min(budget - attempts).min(target - kept);
            let seeds: Vec<u64> = (attempts..attempts + k).map(|a| attempt_seed(plan.seed, class, a)).collect();
            let images = generator.generate(&vec![condition; k], &seeds)?;
            let refs: Vec<&GrayImage> = images.iter().collect();
            let matches = oracle.assess(&refs)?;
            for ((image, seed), (top1, p)) in images.into_iter().zip(seeds).zip(matches) {
                let id = format!("{}_{:02}_{:06}.png", kind.tag(), class, attempts);
                let decision = MatchDecision::new(id.clone(), top1, p, plan.threshold);
                audit.entries.push(AuditEntry {
                    class: class_name(class).to_string(),
                    attempt: attempts,
                    seed,
                    synthetic_id: id.clone(),
                    top1_real_id: decision.top1_real_id.clone(),
                    probability: p,
                    decision: if decision.excluded { "excluded" } else { "kept" }.into(),
                });
                if !decision.excluded {
                    records.push(SyntheticRecord {
                        image_id: id,
                        class_index: class,
                        generator_kind: kind,
                        seed,
                        decision,
                        image,
                        validation: kept < n_val,
                    });
                    kept += 1;
                }
                attempts += 1;
            }
        }
        info!("{}: kept {kept} of {attempts} attempts for {}", kind.tag(), class_name(class));
    }
    let s = audit.summary();
    info!("{}: exclusion rate {:.4} ({} of {})", kind.tag(), s.exclusion_rate, s.excluded, s.kept + s.excluded);
    Ok(AnonymousDataset { records, audit })
}

/// Paths written by [`export_dataset`].
#[derive(Debug, Clone)]
pub struct ExportedDataset {
    pub catalog: PathBuf,
    pub train: PathBuf,
    pub validation: PathBuf,
    pub files: Vec<PathBuf>,
}

fn catalog_record(r: &SyntheticRecord, image_root: &Path) -> ImageRecord {
    ImageRecord {
        image_id: r.image_id.clone(),
        patient_id: r.image_id.trim_end_matches(".png").to_string(),
        follow_up_index: 0,
        patient_age: 0,
        labels: [r.class_index].into_iter().collect(),
        image_path: image_root.join(&r.image_id),
    }
}

/// Writes PNGs under `out_dir/images` and catalogs in the real-metadata
/// schema: `catalog.csv` with every record, plus `train.csv` and
/// `validation.csv`. On failure, files written so far are removed.
pub fn export_dataset(records: &[SyntheticRecord], out_dir: &Path) -> Result<ExportedDataset> {
    if let Some(r) = records.iter().find(|r| r.decision.excluded) {
        return Err(Error::Export(format!("record {} was excluded by the privacy filter", r.image_id)));
    }
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut written: Vec<PathBuf> = Vec::new();
    let result = (|| -> Result<ExportedDataset> {
        for r in records {
            let p = images.join(&r.image_id);
            save_png(&p, &r.image)?;
            written.push(p);
        }
        let all: Vec<ImageRecord> = records.iter().map(|r| catalog_record(r, &images)).collect();
        let catalog = out_dir.join(CATALOG_FILE);
        write_catalog(&catalog, &all, None)?;
        written.push(catalog.clone());
        let (val, train): (Vec<&SyntheticRecord>, Vec<&SyntheticRecord>) = records.iter().partition(|r| r.validation);
        let mut subset = |name: &str, recs: &[&SyntheticRecord]| -> Result<PathBuf> {
            let path = out_dir.join(format!("{name}.csv"));
            let rows: Vec<ImageRecord> = recs.iter().map(|r| catalog_record(r, &images)).collect();
            write_catalog(&path, &rows, Some(name))?;
            written.push(path.clone());
            Ok(path)
        };
        let train = subset("train", &train)?;
        let validation = subset("validation", &val)?;
        Ok(ExportedDataset {
            catalog,
            train,
            validation,
            files: written.clone(),
        })
    })();
    if result.is_err() {
        for p in &written {
            if let Err(e) = fs::remove_file(p) {
                warn!("cleanup of {} failed: {e}", p.display());
            }
        }
    }
    result.map_err(|e| match e {
        Error::Export(_) => e,
        other => Error::Export(other.to_string()),
    })
}

/// Class histogram of finalized records.
pub fn record_histogram(records: &[SyntheticRecord]) -> BTreeMap<usize, usize> {
    let mut out = BTreeMap::new();
    for r in records {
        *out.entry(r.class_index).or_default() += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curation::load_catalog;
    use std::cell::Cell;

    struct Flat;

    impl ImageGenerator for Flat {
        fn kind(&self) -> GeneratorKind {
            GeneratorKind::Ldm
        }

        fn generate(&self, conditions: &[ClassCondition], seeds: &[u64]) -> Result<Vec<GrayImage>> {
            Ok(conditions
                .iter()
                .zip(seeds)
                .map(|(c, s)| {
                    let v = ((c.index() as u64 * 31 + s) % 256) as f32 / 255.0;
                    GrayImage::new(8, vec![v; 64]).unwrap()
                })
                .collect())
        }
    }

    /// Probability chosen from the running attempt count.
    struct Stub<F: Fn(usize) -> f64> {
        f: F,
        calls: Cell<usize>,
    }

    impl<F: Fn(usize) -> f64> Stub<F> {
        fn new(f: F) -> Self {
            Self { f, calls: Cell::new(0) }
        }
    }

    impl<F: Fn(usize) -> f64> MatchOracle for Stub<F> {
        fn assess(&self, images: &[&GrayImage]) -> Result<Vec<(String, f64)>> {
            Ok(images
                .iter()
                .map(|_| {
                    let i = self.calls.get();
                    self.calls.set(i + 1);
                    ("real".to_string(), (self.f)(i))
                })
                .collect())
        }
    }

    fn plan(targets: &[(usize, usize)]) -> SamplingPlan {
        SamplingPlan {
            per_class_targets: targets.iter().copied().collect(),
            validation_targets: targets.iter().map(|&(c, n)| (c, n / 5)).collect(),
            threshold: 0.5,
            max_attempts_factor: 10.0,
            seed: 4,
        }
    }

    #[test]
    fn plan_counts_train_and_validation_only() {
        use crate::curation::ImageRecord;
        let rec = |c: usize| ImageRecord {
            image_id: "x".into(),
            patient_id: "p".into(),
            follow_up_index: 0,
            patient_age: 30,
            labels: [c].into_iter().collect(),
            image_path: PathBuf::new(),
        };
        let split = DatasetSplit {
            train: [vec![rec(1); 70], vec![rec(4); 30]].concat(),
            validation: [vec![rec(1); 10], vec![rec(4); 4]].concat(),
            test: vec![rec(1); 99],
        };
        let p = make_plan(&split, 0.5, 0).unwrap();
        assert_eq!(p.per_class_targets, [(1, 80), (4, 34)].into_iter().collect());
        assert_eq!(p.validation_targets, [(1, 10), (4, 4)].into_iter().collect());
        assert_eq!(p.threshold, 0.5);
        let empty = DatasetSplit {
            train: vec![],
            validation: vec![],
            test: vec![rec(1)],
        };
        assert!(make_plan(&empty, 0.5, 0).is_err());
        assert!(make_plan(&split, 1.5, 0).is_err());
    }

    #[test]
    fn pass_through_filter_keeps_everything() {
        let p = plan(&[(0, 7), (3, 5)]);
        let out = sample_anonymous_dataset(&p, &Flat, &Stub::new(|_| 0.0), 4).unwrap();
        assert_eq!(out.records.len(), 12);
        assert_eq!(out.audit.summary().excluded, 0);
        assert_eq!(record_histogram(&out.records), p.per_class_targets);
    }

    #[test]
    fn reject_all_filter_exhausts_budget() {
        let p = plan(&[(2, 3)]);
        let err = sample_anonymous_dataset(&p, &Flat, &Stub::new(|_| 1.0), 8).err().unwrap();
        assert!(matches!(err, Error::BudgetExhausted { achieved: 0, target: 3, .. }));
    }

    #[test]
    fn alternating_filter_keeps_half() {
        let p = plan(&[(5, 10)]);
        let oracle = Stub::new(|i| if i % 2 == 0 { 0.9 } else { 0.1 });
        let out = sample_anonymous_dataset(&p, &Flat, &oracle, 3).unwrap();
        assert_eq!(out.records.len(), 10);
        assert_eq!(out.audit.entries.len(), 20);
        let s = out.audit.summary();
        assert_eq!((s.kept, s.excluded), (10, 10));
        assert_eq!(s.exclusion_rate, 0.5);
        assert!(out.records.iter().all(|r| r.decision.same_patient_probability <= 0.5));
        assert!(out
            .audit
            .entries
            .iter()
            .filter(|e| e.decision == "excluded")
            .all(|e| e.probability > 0.5));
    }

    #[test]
    fn threshold_is_strict() {
        assert!(!MatchDecision::new("s".into(), "r".into(), 0.5, 0.5).excluded);
        assert!(MatchDecision::new("s".into(), "r".into(), 0.5000001, 0.5).excluded);
    }

    #[test]
    fn batch_size_does_not_change_outcome() {
        let p = plan(&[(1, 6), (9, 4)]);
        let f = |i: usize| if i % 3 == 0 { 0.7 } else { 0.2 };
        let a = sample_anonymous_dataset(&p, &Flat, &Stub::new(f), 1).unwrap();
        let b = sample_anonymous_dataset(&p, &Flat, &Stub::new(f), 64).unwrap();
        assert_eq!(a.audit, b.audit);
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn export_is_reproducible_and_matches_histogram() {
        let p = plan(&[(0, 20), (3, 14)]);
        let out = sample_anonymous_dataset(&p, &Flat, &Stub::new(|_| 0.1), 8).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let e1 = export_dataset(&out.records, d1.path()).unwrap();
        export_dataset(&out.records, d2.path()).unwrap();
        let pngs = fs::read_dir(d1.path().join("images")).unwrap().count();
        assert_eq!(pngs, 34);
        let catalog = load_catalog(&e1.catalog).unwrap();
        assert_eq!(catalog.len(), 34);
        let counts = class_counts(&catalog);
        assert_eq!((counts[0], counts[3]), (20, 14));
        for f in ["catalog.csv", "train.csv", "validation.csv", "images/ldm_03_000005.png"] {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap(), "{f}");
        }
        assert_eq!(load_catalog(&e1.validation).unwrap().len(), 4 + 2);
        let bad = vec![SyntheticRecord {
            decision: MatchDecision::new("x".into(), "r".into(), 0.9, 0.5),
            ..out.records[0].clone()
        }];
        assert!(matches!(export_dataset(&bad, d1.path()), Err(Error::Export(_))));
    }
}
