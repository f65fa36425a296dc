//! Metadata ingestion, record filtering, and patient-disjoint splitting.
//!
//! Catalog files follow the public ChestX-ray14 CSV layout (`Image Index`,
//! `Finding Labels`, `Follow-up #`, `Patient ID`, `Patient Age`). Split
//! catalogs add a trailing `split` column. Each catalog directory carries a
//! `catalog_meta.json` sidecar naming the image root, so downstream stages can
//! resolve pixels without extra flags.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classes::{class_index, metadata_label, NUM_CLASSES};
use crate::error::{ConfigIssue, Error, Result};
use crate::seeds::rng_from_seed;

pub const CATALOG_META_FILE: &str = "catalog_meta.json";
pub const SPLIT_NAMES: [&str; 3] = ["train", "validation", "test"];

/// One radiograph and its metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub patient_id: String,
    pub follow_up_index: u32,
    pub patient_age: u32,
    /// Class indices, sorted.
    pub labels: BTreeSet<usize>,
    pub image_path: PathBuf,
}

impl ImageRecord {
    /// The class index when the record carries exactly one label.
    pub fn single_label(&self) -> Option<usize> {
        if self.labels.len() == 1 {
            self.labels.iter().next().copied()
        } else {
            None
        }
    }

    fn label_field(&self) -> String {
        self.labels
            .iter()
            .map(|&c| metadata_label(c))
            .collect::<Vec<_>>()
            .join("|")
    }
}

/// Header names for the required metadata columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub image_id: String,
    pub labels: String,
    pub follow_up: String,
    pub patient_id: String,
    pub patient_age: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            image_id: "Image Index".into(),
            labels: "Finding Labels".into(),
            follow_up: "Follow-up #".into(),
            patient_id: "Patient ID".into(),
            patient_age: "Patient Age".into(),
        }
    }
}

/// Parsed records plus the rows that could not be parsed.
#[derive(Debug)]
pub struct ParsedCatalog {
    pub records: Vec<ImageRecord>,
    pub row_errors: Vec<Error>,
}

pub fn parse_catalog(metadata_file: &Path, image_root: &Path) -> Result<ParsedCatalog> {
    parse_catalog_with(metadata_file, image_root, &ColumnMap::default())
}

pub fn parse_catalog_with(
    metadata_file: &Path,
    image_root: &Path,
    columns: &ColumnMap,
) -> Result<ParsedCatalog> {
    let text = fs::read_to_string(metadata_file).map_err(|e| Error::io(metadata_file, e))?;
    if text.trim().is_empty() {
        return Err(Error::Catalog(format!(
            "{} is empty",
            metadata_file.display()
        )));
    }
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| {
            Error::Catalog(format!(
                "{}: missing column {name:?}",
                metadata_file.display()
            ))
        })
    };
    let idx = [
        col(&columns.image_id)?,
        col(&columns.labels)?,
        col(&columns.follow_up)?,
        col(&columns.patient_id)?,
        col(&columns.patient_age)?,
    ];

    let mut records = Vec::new();
    let mut row_errors = Vec::new();
    let mut seen = HashSet::new();
    for (rows, row) in reader.records().enumerate() {
        let row = row?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(rows + 2);
        match parse_row(&row, &idx, image_root) {
            Ok(rec) => {
                if seen.insert(rec.image_id.clone()) {
                    records.push(rec);
                } else {
                    row_errors.push(Error::Record {
                        row: line,
                        message: format!("duplicate image id {}", rec.image_id),
                    });
                }
            }
            Err(message) => row_errors.push(Error::Record { row: line, message }),
        }
    }
    Ok(ParsedCatalog {
        records,
        row_errors,
    })
}

fn parse_row(
    row: &csv::StringRecord,
    idx: &[usize; 5],
    image_root: &Path,
) -> std::result::Result<ImageRecord, String> {
    let field = |i: usize, what: &str| -> std::result::Result<&str, String> {
        row.get(idx[i])
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| format!("missing {what}"))
    };
    let image_id = field(0, "image id")?.to_string();
    let mut labels = BTreeSet::new();
    for name in field(1, "finding labels")?.split('|') {
        let c = class_index(name).ok_or_else(|| format!("unknown label {name:?}"))?;
        labels.insert(c);
    }
    let follow_up_index = field(2, "follow-up number")?
        .parse::<u32>()
        .map_err(|_| "non-numeric follow-up number".to_string())?;
    let patient_id = field(3, "patient id")?.to_string();
    let age = field(4, "patient age")?;
    let patient_age = age
        .trim_end_matches(['Y', 'y'])
        .parse::<u32>()
        .map_err(|_| format!("non-numeric age {age:?}"))?;
    Ok(ImageRecord {
        image_path: image_root.join(&image_id),
        image_id,
        patient_id,
        follow_up_index,
        patient_age,
        labels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationConfig {
    pub max_followups_per_patient: usize,
    pub min_age_exclusive: u32,
    pub split_ratio: [f64; 3],
    pub seed: u64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            max_followups_per_patient: 5,
            min_age_exclusive: 21,
            split_ratio: [0.7, 0.1, 0.2],
            seed: 0,
        }
    }
}

impl CurationConfig {
    pub fn issues(&self, prefix: &str) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        if self.max_followups_per_patient == 0 {
            out.push(ConfigIssue::new(
                format!("{prefix}max_followups_per_patient"),
                "must be positive",
            ));
        }
        if self.split_ratio.iter().any(|&r| !(r > 0.0)) {
            out.push(ConfigIssue::new(
                format!("{prefix}split_ratio"),
                "entries must be positive",
            ));
        }
        let sum: f64 = self.split_ratio.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            out.push(ConfigIssue::new(
                format!("{prefix}split_ratio"),
                format!("entries must sum to 1, got {sum}"),
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues("");
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }
}

/// Parses a `70:10:20` style ratio into fractions.
pub fn parse_ratio(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Input(format!("bad ratio {s:?}")))?;
    if parts.len() != 3 {
        return Err(Error::Input(format!("ratio {s:?} needs three parts")));
    }
    let total: f64 = parts.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Input(format!("ratio {s:?} sums to zero")));
    }
    Ok([parts[0] / total, parts[1] / total, parts[2] / total])
}

/// Keeps single-label records of patients strictly older than the age
/// threshold, capping each patient at their earliest follow-ups.
pub fn curate(records: &[ImageRecord], config: &CurationConfig) -> Vec<ImageRecord> {
    let eligible: Vec<&ImageRecord> = records
        .iter()
        .filter(|r| r.labels.len() == 1 && r.patient_age > config.min_age_exclusive)
        .collect();

    let mut by_patient: BTreeMap<&str, Vec<&ImageRecord>> = BTreeMap::new();
    for r in &eligible {
        by_patient.entry(r.patient_id.as_str()).or_default().push(r);
    }
    let mut keep: HashSet<&str> = HashSet::new();
    for recs in by_patient.values_mut() {
        recs.sort_by(|a, b| {
            a.follow_up_index
                .cmp(&b.follow_up_index)
                .then_with(|| a.image_id.cmp(&b.image_id))
        });
        keep.extend(
            recs.iter()
                .take(config.max_followups_per_patient)
                .map(|r| r.image_id.as_str()),
        );
    }
    eligible
        .into_iter()
        .filter(|r| keep.contains(r.image_id.as_str()))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<ImageRecord>,
    pub validation: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

impl DatasetSplit {
    pub fn subsets(&self) -> [&[ImageRecord]; 3] {
        [&self.train, &self.validation, &self.test]
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Training and validation records, the population synthetic datasets
    /// are sized against.
    pub fn train_and_validation(&self) -> Vec<ImageRecord> {
        self.train.iter().chain(&self.validation).cloned().collect()
    }
}

/// Per-class image counts of a record list (records must be single-label).
pub fn class_counts<'a>(records: impl IntoIterator<Item = &'a ImageRecord>) -> [usize; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    for r in records {
        if let Some(c) = r.single_label() {
            counts[c] += 1;
        }
    }
    counts
}

/// Greedy stratified patient-wise split.
///
/// Patients are visited in descending image count (seeded shuffle breaks
/// ties) and each is placed in the subset whose relative per-class deficit,
/// weighted by the patient's own class histogram, is largest. With three or
/// more patients every subset receives at least one.
pub fn split_by_patient(records: &[ImageRecord], config: &CurationConfig) -> Result<DatasetSplit> {
    config.validate()?;
    let mut by_patient: BTreeMap<&str, Vec<&ImageRecord>> = BTreeMap::new();
    for r in records {
        if r.single_label().is_none() {
            return Err(Error::Split(format!(
                "record {} is not single-label; curate first",
                r.image_id
            )));
        }
        by_patient.entry(r.patient_id.as_str()).or_default().push(r);
    }
    if by_patient.len() < 3 {
        return Err(Error::Split(format!(
            "need at least 3 patients, got {}",
            by_patient.len()
        )));
    }

    let global = class_counts(records);
    let ratio = config.split_ratio;
    let target: Vec<[f64; NUM_CLASSES]> = ratio
        .iter()
        .map(|&r| {
            let mut t = [0.0; NUM_CLASSES];
            for c in 0..NUM_CLASSES {
                t[c] = r * global[c] as f64;
            }
            t
        })
        .collect();

    let mut patients: Vec<(&str, Vec<&ImageRecord>)> = by_patient.into_iter().collect();
    patients.shuffle(&mut rng_from_seed(config.seed));
    patients.sort_by(|a, b| b.1.len().cmp(&a.1.len()));

    let mut current = [[0usize; NUM_CLASSES]; 3];
    let mut assignment: BTreeMap<&str, usize> = BTreeMap::new();
    for (pid, recs) in &patients {
        let hist = class_counts(recs.iter().copied());
        let n = recs.len() as f64;
        let mut best = (0usize, f64::NEG_INFINITY);
        for s in 0..3 {
            // relative deficit, so small subsets are not starved
            let score: f64 = (0..NUM_CLASSES)
                .filter(|&c| hist[c] > 0)
                .map(|c| hist[c] as f64 / n * (target[s][c] - current[s][c] as f64) / target[s][c])
                .sum();
            if score > best.1 {
                best = (s, score);
            }
        }
        for c in 0..NUM_CLASSES {
            current[best.0][c] += hist[c];
        }
        assignment.insert(pid, best.0);
    }

    let mut split = DatasetSplit::default();
    for r in records {
        match assignment[r.patient_id.as_str()] {
            0 => split.train.push(r.clone()),
            1 => split.validation.push(r.clone()),
            _ => split.test.push(r.clone()),
        }
    }
    Ok(split)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CatalogMeta {
    image_root: PathBuf,
}

/// Writes a catalog CSV; `split` adds the trailing split column.
pub fn write_catalog(path: &Path, records: &[ImageRecord], split: Option<&str>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "Image Index",
        "Finding Labels",
        "Follow-up #",
        "Patient ID",
        "Patient Age",
    ];
    if split.is_some() {
        header.push("split");
    }
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.image_id.clone(),
            r.label_field(),
            r.follow_up_index.to_string(),
            r.patient_id.clone(),
            r.patient_age.to_string(),
        ];
        if let Some(s) = split {
            row.push(s.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Records the image root of the catalogs in `dir`.
pub fn write_catalog_meta(dir: &Path, image_root: &Path) -> Result<()> {
    let meta = CatalogMeta {
        image_root: image_root.to_path_buf(),
    };
    let path = dir.join(CATALOG_META_FILE);
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

fn image_root_for(catalog: &Path) -> Result<PathBuf> {
    let dir = catalog
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let meta_path = dir.join(CATALOG_META_FILE);
    if !meta_path.exists() {
        return Ok(dir.join("images"));
    }
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CatalogMeta = serde_json::from_str(&text)?;
    Ok(if meta.image_root.is_absolute() {
        meta.image_root
    } else {
        dir.join(meta.image_root)
    })
}

/// Loads a catalog written by this crate, resolving image paths through the
/// directory's sidecar. Any unparseable row is an error here.
pub fn load_catalog(path: &Path) -> Result<Vec<ImageRecord>> {
    let root = image_root_for(path)?;
    let parsed = parse_catalog(path, &root)?;
    if let Some(e) = parsed.row_errors.into_iter().next() {
        return Err(Error::Catalog(format!("{}: {e}", path.display())));
    }
    Ok(parsed.records)
}

pub fn write_split(dir: &Path, split: &DatasetSplit, image_root: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for (name, recs) in SPLIT_NAMES.iter().zip(split.subsets()) {
        let path = dir.join(format!("{name}.csv"));
        write_catalog(&path, recs, Some(name))?;
        paths.push(path);
    }
    write_catalog_meta(dir, image_root)?;
    paths.push(dir.join(CATALOG_META_FILE));
    Ok(paths)
}

pub fn read_split(dir: &Path) -> Result<DatasetSplit> {
    let load = |name: &str| load_catalog(&dir.join(format!("{name}.csv")));
    Ok(DatasetSplit {
        train: load("train")?,
        validation: load("validation")?,
        test: load("test")?,
    })
}
