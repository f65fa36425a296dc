//! Stage operations on files, shared by the orchestrator and the
//! per-stage CLI subcommands.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use serde_json::{json, Value};

use crate::classes::{class_name, NUM_CLASSES};
use crate::classifier::{load_labeled, train_classifier, Classifier, ClassifierConfig};
use crate::curation::{
    class_counts, curate, load_catalog, parse_catalog, read_split, split_by_patient, write_split, CurationConfig,
    ImageRecord,
};
use crate::diffusion::{self, train_diffusion, DiffusionConfig, LatentDataset, LatentDiffusion};
use crate::error::{Error, Result};
use crate::eval::{aggregate_runs, evaluate_scores, render_report, AucReport, EvaluationRecord, RenderedReport};
use crate::image_io::{load_png, GrayImage};
use crate::matcher::{build_retrieval_index, train_matcher, MatcherConfig, PatientImage, PatientMatcher, RetrievalIndex};
use crate::nn::Checkpoint;
use crate::pggan::{self, train_pggan, GanConfig, Pggan};
use crate::privacy::{
    export_dataset, make_plan, record_histogram, sample_anonymous_dataset, ImageGenerator, MatcherOracle, AUDIT_FILE,
};
use crate::vae::{train_autoencoder, Autoencoder, AutoencoderConfig};

use super::config::PrivacyConfig;

pub const EVALUATION_FILE: &str = "evaluation.json";
pub const LATENT_SPLITS: [&str; 2] = ["train", "validation"];

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

/// Class index of every record; curated catalogs are single-label.
pub fn single_labels(records: &[ImageRecord]) -> Result<Vec<usize>> {
    records
        .iter()
        .map(|r| {
            r.single_label()
                .ok_or_else(|| Error::Input(format!("record {} is not single-label", r.image_id)))
        })
        .collect()
}

pub fn load_images(records: &[ImageRecord], size: usize) -> Result<Vec<GrayImage>> {
    records.iter().map(|r| load_png(&r.image_path, size)).collect()
}

fn histogram(records: &[ImageRecord]) -> BTreeMap<String, usize> {
    let counts = class_counts(records);
    (0..NUM_CLASSES)
        .filter(|&c| counts[c] > 0)
        .map(|c| (class_name(c).to_string(), counts[c]))
        .collect()
}

/// Parses, curates and splits a catalog into `out_dir/{train,validation,test}.csv`.
/// `recorded_root` is the image root written to the sidecar (relative
/// roots resolve against `out_dir`).
pub fn curate_to_dir(
    metadata: &Path,
    image_root: &Path,
    recorded_root: &Path,
    config: &CurationConfig,
    out_dir: &Path,
) -> Result<Value> {
    config.validate()?;
    let parsed = parse_catalog(metadata, image_root)?;
    for e in &parsed.row_errors {
        warn!("curate: skipping {e}");
    }
    let curated = curate(&parsed.records, config);
    let split = split_by_patient(&curated, config)?;
    write_split(out_dir, &split, recorded_root)?;
    info!(
        "curate: {} parsed, {} kept, split {}/{}/{}",
        parsed.records.len(),
        curated.len(),
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    Ok(json!({
        "parsed": parsed.records.len(),
        "row_errors": parsed.row_errors.len(),
        "curated": curated.len(),
        "train": histogram(&split.train),
        "validation": histogram(&split.validation),
        "test": histogram(&split.test),
    }))
}

pub fn train_vae_from_split(
    split_dir: &Path,
    config: &AutoencoderConfig,
    epochs: usize,
    seed: u64,
    out: &Path,
) -> Result<Value> {
    let split = read_split(split_dir)?;
    let train = load_images(&split.train, config.image_size)?;
    let val = load_images(&split.validation, config.image_size)?;
    let trained = train_autoencoder(
        &train.iter().collect::<Vec<_>>(),
        &val.iter().collect::<Vec<_>>(),
        config,
        epochs,
        seed,
    )?;
    ensure_parent(out)?;
    trained.model.save(out, trained.best_epoch, trained.best_val_reconstruction)?;
    write_json(&out.with_extension("history.json"), &trained.history)?;
    Ok(json!({
        "best_epoch": trained.best_epoch,
        "best_val_reconstruction": trained.best_val_reconstruction,
        "latent_scale": trained.model.latent_scale,
        "codes_used": trained.history.last().map(|h| h.codes_used),
    }))
}

/// Encodes the train and validation subsets into one latent checkpoint.
pub fn encode_split(vae_ckpt: &Path, split_dir: &Path, out: &Path) -> Result<Value> {
    let vae = Autoencoder::load(vae_ckpt)?;
    let split = read_split(split_dir)?;
    let mut sets = BTreeMap::new();
    for (name, records) in LATENT_SPLITS.iter().zip([&split.train, &split.validation]) {
        let images = load_images(records, vae.config.image_size)?;
        let classes = single_labels(records)?;
        sets.insert(
            name.to_string(),
            LatentDataset::encode(&vae, &images.iter().collect::<Vec<_>>(), &classes)?,
        );
    }
    ensure_parent(out)?;
    LatentDataset::save(out, &sets, &vae)?;
    Ok(json!({ "train": sets["train"].len(), "validation": sets["validation"].len() }))
}

pub fn train_ldm_from_latents(
    latents: &Path,
    config: &DiffusionConfig,
    max_epochs: usize,
    seed: u64,
    out: &Path,
) -> Result<Value> {
    let (mut sets, vae) = LatentDataset::load(latents)?;
    let train = sets
        .remove("train")
        .ok_or_else(|| Error::Input("latent file lacks a train set".into()))?;
    let val = sets.remove("validation").unwrap_or(LatentDataset {
        latents: Vec::new(),
        classes: Vec::new(),
    });
    let trained = train_diffusion(&train, &val, config, max_epochs, seed)?;
    let model = LatentDiffusion {
        denoiser: trained.denoiser,
        vae,
    };
    ensure_parent(out)?;
    model.save(out, trained.best_epoch, trained.best_val_loss)?;
    write_json(&out.with_extension("history.json"), &trained.history)?;
    Ok(json!({
        "best_epoch": trained.best_epoch,
        "best_val_loss": trained.best_val_loss,
        "epochs_run": trained.history.len(),
    }))
}

pub fn train_gan_from_split(split_dir: &Path, config: &GanConfig, seed: u64, out: &Path) -> Result<Value> {
    let split = read_split(split_dir)?;
    let images = load_images(&split.train, config.growth.target_resolution)?;
    let classes = single_labels(&split.train)?;
    let trained = train_pggan(&images.iter().collect::<Vec<_>>(), &classes, config, seed)?;
    ensure_parent(out)?;
    trained.model.save(out)?;
    write_json(&out.with_extension("history.json"), &trained.history)?;
    let last = trained.history.last().and_then(|s| s.epochs.last());
    Ok(json!({
        "stages": trained.history.len(),
        "final_discriminator_loss": last.map(|e| e.discriminator),
        "final_generator_loss": last.map(|e| e.generator),
        "final_penalty": last.map(|e| e.penalty),
    }))
}

fn patient_images<'a>(records: &'a [ImageRecord], images: &'a [GrayImage]) -> Vec<PatientImage<'a>> {
    records
        .iter()
        .zip(images)
        .map(|(r, image)| PatientImage {
            patient_id: &r.patient_id,
            image,
        })
        .collect()
}

/// Trains on the train subset and reports held-out metrics on validation.
pub fn train_matcher_from_split(split_dir: &Path, config: &MatcherConfig, seed: u64, out: &Path) -> Result<Value> {
    let split = read_split(split_dir)?;
    let train_images = load_images(&split.train, config.input_size)?;
    let val_images = load_images(&split.validation, config.input_size)?;
    let train = patient_images(&split.train, &train_images);
    let val = patient_images(&split.validation, &val_images);
    let trained = train_matcher(&train, &val, config, seed)?;
    ensure_parent(out)?;
    trained.matcher.save(out, trained.validation.as_ref())?;
    Ok(json!({
        "final_loss": trained.history.last(),
        "validation": trained.validation,
    }))
}

/// Indexes the train and validation subsets: every real image a synthetic
/// sample could have been learned from.
pub fn build_index_from_split(matcher_ckpt: &Path, split_dir: &Path, include_validation: bool, out: &Path) -> Result<Value> {
    let matcher = PatientMatcher::load(matcher_ckpt)?;
    let split = read_split(split_dir)?;
    let records = if include_validation {
        split.train_and_validation()
    } else {
        split.train.clone()
    };
    let (index, missing) = build_retrieval_index(&matcher, &records)?;
    if index.is_empty() {
        return Err(Error::Input("no readable image to index".into()));
    }
    ensure_parent(out)?;
    index.save(out)?;
    Ok(json!({ "indexed": index.len(), "missing": missing }))
}

/// Loads a generator checkpoint of either kind.
pub fn load_generator(path: &Path) -> Result<Box<dyn ImageGenerator>> {
    let kind = Checkpoint::load(path)?.kind().to_string();
    match kind.as_str() {
        diffusion::CHECKPOINT_KIND => Ok(Box::new(LatentDiffusion::load(path)?)),
        pggan::CHECKPOINT_KIND => Ok(Box::new(Pggan::load(path)?)),
        other => Err(Error::Checkpoint(format!(
            "{} holds a {other:?} checkpoint, not a generator",
            path.display()
        ))),
    }
}

/// Privacy-filtered synthesis mirroring the class counts of train plus
/// validation; writes the dataset, its catalogs and the audit log.
pub fn synthesize_to_dir(
    generator: &dyn ImageGenerator,
    matcher_ckpt: &Path,
    index_path: &Path,
    split_dir: &Path,
    privacy: &PrivacyConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<Value> {
    let matcher = PatientMatcher::load(matcher_ckpt)?;
    let index = RetrievalIndex::load(index_path)?;
    let split = read_split(split_dir)?;
    let size = matcher.config.input_size;
    let by_id: HashMap<&str, &ImageRecord> = split
        .train
        .iter()
        .chain(&split.validation)
        .map(|r| (r.image_id.as_str(), r))
        .collect();
    let mut reference = HashMap::new();
    for id in index.ids() {
        let rec = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::Input(format!("indexed id {id} is not in the split")))?;
        reference.insert(id.clone(), load_png(&rec.image_path, size)?);
    }
    let oracle = MatcherOracle::new(&matcher, &index, reference)?;
    let mut plan = make_plan(&split, privacy.threshold, seed)?;
    plan.max_attempts_factor = privacy.max_attempts_factor;
    let dataset = sample_anonymous_dataset(&plan, generator, &oracle, privacy.batch_size)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_json(&out_dir.join("plan.json"), &plan)?;
    dataset.audit.write_csv(&out_dir.join(AUDIT_FILE))?;
    export_dataset(&dataset.records, &out_dir.join("dataset"))?;
    let hist: BTreeMap<String, usize> = record_histogram(&dataset.records)
        .into_iter()
        .map(|(c, n)| (class_name(c).to_string(), n))
        .collect();
    Ok(json!({
        "generator": generator.kind().tag(),
        "audit": dataset.audit.summary(),
        "histogram": hist,
    }))
}

pub fn train_clf_from_catalogs(
    train_csv: &Path,
    val_csv: &Path,
    config: &ClassifierConfig,
    seed: u64,
    out: &Path,
) -> Result<Value> {
    let train = load_labeled(&load_catalog(train_csv)?, config.input_size)?;
    let val = load_labeled(&load_catalog(val_csv)?, config.input_size)?;
    let trained = train_classifier(&train, &val, config, seed)?;
    ensure_parent(out)?;
    trained.classifier.save(out, trained.best_epoch, trained.best_val_loss)?;
    write_json(&out.with_extension("log.json"), &trained.log)?;
    Ok(json!({
        "best_epoch": trained.best_epoch,
        "best_val_loss": trained.best_val_loss,
        "epochs_run": trained.log.len(),
        "final_learning_rate": trained.log.last().map(|e| e.learning_rate),
    }))
}

/// Per-class test AUCs of every classifier checkpoint.
pub fn evaluate_classifiers(tag: &str, checkpoints: &[PathBuf], test_csv: &Path) -> Result<EvaluationRecord> {
    let test = load_catalog(test_csv)?;
    if test.is_empty() {
        return Err(Error::Input(format!("test catalog {} is empty", test_csv.display())));
    }
    let classes = single_labels(&test)?;
    let mut runs = Vec::with_capacity(checkpoints.len());
    let mut loaded: HashMap<usize, Vec<GrayImage>> = HashMap::new();
    for ck in checkpoints {
        let clf = Classifier::load(ck)?;
        let size = clf.config.input_size;
        if let std::collections::hash_map::Entry::Vacant(e) = loaded.entry(size) {
            e.insert(load_images(&test, size)?);
        }
        let images: Vec<&GrayImage> = loaded[&size].iter().collect();
        runs.push(evaluate_scores(&clf.predict_batch(&images)?, &classes)?);
    }
    Ok(EvaluationRecord {
        training_set_tag: tag.to_string(),
        runs,
    })
}

pub fn load_evaluation(path: &Path) -> Result<EvaluationRecord> {
    let path = if path.is_dir() { path.join(EVALUATION_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// One aggregated report per evaluation, plus the rendered comparison.
pub fn build_report(evaluations: &[EvaluationRecord]) -> Result<(Vec<AucReport>, RenderedReport)> {
    let reports = evaluations
        .iter()
        .map(|e| aggregate_runs(&e.training_set_tag, &e.runs))
        .collect::<Result<Vec<_>>>()?;
    let rendered = render_report(&reports)?;
    Ok((reports, rendered))
}

/// Writes `report.txt`, `report.csv` and `reports.json` under `out_dir`.
pub fn write_report(out_dir: &Path, reports: &[AucReport], rendered: &RenderedReport) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let txt = out_dir.join("report.txt");
    fs::write(&txt, &rendered.text).map_err(|e| Error::io(&txt, e))?;
    let csv = out_dir.join("report.csv");
    fs::write(&csv, &rendered.csv).map_err(|e| Error::io(&csv, e))?;
    write_json(&out_dir.join("reports.json"), reports)
}
