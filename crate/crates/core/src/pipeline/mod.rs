//! Experiment orchestration: the full real-vs-synthetic recipe as a chain of
//! resumable stages, each writing into its own directory under
//! `<out>/<run_id>/` and recorded with content hashes in `manifest.json`.

mod config;
mod manifest;
pub mod stages;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::info;
use serde::Serialize;
use serde_json::{json, Value};

pub use config::{load_config, validate_config, DataConfig, ExperimentConfig, PrivacyConfig, TrainingConfig};
pub use manifest::{
    hash_json, hash_tree, outputs_intact, sha256_hex, Artifact, DependencyRef, RunManifest, StageRecord, StageStatus,
    MANIFEST_FILE,
};

use crate::error::{Error, Result};
use crate::privacy::{GeneratorKind, CATALOG_FILE};
use crate::seeds::derive_seed;
use crate::toy::generate_toy_corpus;
use stages::*;

/// Which data a classifier is trained on; one report column each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrainingSet {
    Real,
    Synthetic(GeneratorKind),
}

impl TrainingSet {
    pub const ALL: [TrainingSet; 3] = [
        TrainingSet::Real,
        TrainingSet::Synthetic(GeneratorKind::Ldm),
        TrainingSet::Synthetic(GeneratorKind::Pggan),
    ];

    pub fn tag(self) -> &'static str {
        match self {
            TrainingSet::Real => "real",
            TrainingSet::Synthetic(GeneratorKind::Ldm) => "syn_ldm",
            TrainingSet::Synthetic(GeneratorKind::Pggan) => "syn_pggan",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    ToyData,
    Curate,
    TrainVae,
    Encode,
    TrainLdm,
    TrainGan,
    TrainMatcher,
    BuildIndex,
    Synthesize(GeneratorKind),
    TrainClf(TrainingSet, usize),
    Evaluate(TrainingSet),
    Report,
}

impl Stage {
    pub fn name(self) -> String {
        match self {
            Stage::ToyData => "toy_data".into(),
            Stage::Curate => "curate".into(),
            Stage::TrainVae => "train_vae".into(),
            Stage::Encode => "encode".into(),
            Stage::TrainLdm => "train_ldm".into(),
            Stage::TrainGan => "train_gan".into(),
            Stage::TrainMatcher => "train_matcher".into(),
            Stage::BuildIndex => "build_index".into(),
            Stage::Synthesize(k) => format!("synthesize_{}", k.tag()),
            Stage::TrainClf(t, r) => format!("train_clf_{}_{r}", t.tag()),
            Stage::Evaluate(t) => format!("evaluate_{}", t.tag()),
            Stage::Report => "report".into(),
        }
    }

    /// Seed label and repetition index. Classifier run `r` uses the same
    /// seed for every training set.
    fn seed_parts(self) -> (String, u64) {
        match self {
            Stage::TrainClf(_, r) => ("train_clf".into(), r as u64),
            other => (other.name(), 0),
        }
    }

    fn dependencies(self, cfg: &ExperimentConfig) -> Vec<Stage> {
        use Stage::*;
        let synth = |k| vec![Curate, Synthesize(k)];
        match self {
            ToyData => vec![],
            Curate if cfg.data.toy.is_some() => vec![ToyData],
            Curate => vec![],
            TrainVae | TrainGan | TrainMatcher => vec![Curate],
            Encode => vec![Curate, TrainVae],
            TrainLdm => vec![Encode],
            BuildIndex => vec![Curate, TrainMatcher],
            Synthesize(GeneratorKind::Ldm) => vec![Curate, TrainLdm, TrainMatcher, BuildIndex],
            Synthesize(GeneratorKind::Pggan) => vec![Curate, TrainGan, TrainMatcher, BuildIndex],
            TrainClf(TrainingSet::Real, _) => vec![Curate],
            TrainClf(TrainingSet::Synthetic(k), _) => synth(k),
            Evaluate(t) => {
                let mut d = vec![Curate];
                d.extend((0..cfg.num_classifier_runs).map(|r| TrainClf(t, r)));
                d
            }
            Report => TrainingSet::ALL.iter().map(|&t| Evaluate(t)).collect(),
        }
    }

    /// The configuration the stage's output depends on, beyond its inputs.
    fn config_value(self, cfg: &ExperimentConfig) -> Result<Value> {
        use Stage::*;
        Ok(match self {
            ToyData => json!(cfg.data.toy),
            Curate => json!({ "data": cfg.data, "curation": cfg.curation }),
            TrainVae => json!({ "vae": cfg.vae, "epochs": cfg.training.vae_epochs }),
            Encode => Value::Null,
            TrainLdm => json!({ "diffusion": cfg.diffusion, "max_epochs": cfg.training.diffusion_max_epochs }),
            TrainGan => json!(cfg.gan),
            TrainMatcher => json!(cfg.matcher),
            BuildIndex => json!({ "index_validation": cfg.privacy.index_validation }),
            Synthesize(_) => json!(cfg.privacy),
            TrainClf(..) => json!(cfg.classifier),
            Evaluate(_) => Value::Null,
            Report => json!(cfg.num_classifier_runs),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlannedStage {
    #[serde(skip)]
    pub stage: Stage,
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub dependencies: Vec<String>,
}

/// Every stage in execution order with its derived seed.
pub fn plan_stages(cfg: &ExperimentConfig) -> Result<Vec<PlannedStage>> {
    use Stage::*;
    let mut order = Vec::new();
    if cfg.data.toy.is_some() {
        order.push(ToyData);
    }
    order.extend([Curate, TrainVae, Encode, TrainLdm, TrainGan, TrainMatcher, BuildIndex]);
    order.extend([Synthesize(GeneratorKind::Ldm), Synthesize(GeneratorKind::Pggan)]);
    for t in TrainingSet::ALL {
        order.extend((0..cfg.num_classifier_runs).map(|r| TrainClf(t, r)));
    }
    order.extend(TrainingSet::ALL.map(Evaluate));
    order.push(Report);
    order
        .into_iter()
        .map(|stage| {
            let (label, rep) = stage.seed_parts();
            Ok(PlannedStage {
                stage,
                name: stage.name(),
                seed: derive_seed(cfg.base_seed, &label, rep),
                config_hash: hash_json(&stage.config_value(cfg)?)?,
                dependencies: stage.dependencies(cfg).into_iter().map(Stage::name).collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanStatus {
    /// A completed record with a matching key and intact outputs exists.
    Cached,
    Pending,
}

pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    run_dir: PathBuf,
}

struct StageResult {
    metrics: Value,
    checkpoint: Option<PathBuf>,
}

impl Runner<'_> {
    fn dir(&self, stage: Stage) -> PathBuf {
        self.run_dir.join(stage.name())
    }

    fn split_dir(&self) -> PathBuf {
        self.dir(Stage::Curate)
    }

    fn training_catalogs(&self, set: TrainingSet) -> (PathBuf, PathBuf) {
        let dir = match set {
            TrainingSet::Real => self.split_dir(),
            TrainingSet::Synthetic(k) => self.dir(Stage::Synthesize(k)).join("dataset"),
        };
        (dir.join("train.csv"), dir.join("validation.csv"))
    }

    fn generator_checkpoint(&self, kind: GeneratorKind) -> PathBuf {
        match kind {
            GeneratorKind::Ldm => self.dir(Stage::TrainLdm).join("ldm.safetensors"),
            GeneratorKind::Pggan => self.dir(Stage::TrainGan).join("gan.safetensors"),
        }
    }

    fn execute(&self, planned: &PlannedStage) -> Result<StageResult> {
        let cfg = self.cfg;
        let dir = self.dir(planned.stage);
        let seed = planned.seed;
        let with_ckpt = |metrics: Value, ck: PathBuf| StageResult {
            metrics,
            checkpoint: Some(ck),
        };
        Ok(match planned.stage {
            Stage::ToyData => {
                let toy = cfg.data.toy.as_ref().expect("planned only for toy data");
                let corpus = generate_toy_corpus(toy, &dir)?;
                StageResult {
                    metrics: json!({ "images": corpus.num_images }),
                    checkpoint: None,
                }
            }
            Stage::Curate => {
                let (metadata, root, recorded) = match &cfg.data.toy {
                    Some(_) => {
                        let toy = self.dir(Stage::ToyData);
                        // relative, so catalogs do not depend on where the run lives
                        (toy.join("metadata.csv"), toy.join("images"), PathBuf::from("../toy_data/images"))
                    }
                    None => {
                        let m = cfg.data.metadata.clone().expect("validated");
                        let r = cfg.data.image_root.clone().expect("validated");
                        let abs = fs::canonicalize(&r).map_err(|e| Error::io(&r, e))?;
                        (m, r, abs)
                    }
                };
                let mut curation = cfg.curation.clone();
                curation.seed = seed;
                StageResult {
                    metrics: curate_to_dir(&metadata, &root, &recorded, &curation, &dir)?,
                    checkpoint: None,
                }
            }
            Stage::TrainVae => {
                let ck = dir.join("vae.safetensors");
                let m = train_vae_from_split(&self.split_dir(), &cfg.vae, cfg.training.vae_epochs, seed, &ck)?;
                with_ckpt(m, ck)
            }
            Stage::Encode => {
                let out = dir.join("latents.safetensors");
                let vae = self.dir(Stage::TrainVae).join("vae.safetensors");
                with_ckpt(encode_split(&vae, &self.split_dir(), &out)?, out)
            }
            Stage::TrainLdm => {
                let ck = dir.join("ldm.safetensors");
                let latents = self.dir(Stage::Encode).join("latents.safetensors");
                let m = train_ldm_from_latents(&latents, &cfg.diffusion, cfg.training.diffusion_max_epochs, seed, &ck)?;
                with_ckpt(m, ck)
            }
            Stage::TrainGan => {
                let ck = dir.join("gan.safetensors");
                with_ckpt(train_gan_from_split(&self.split_dir(), &cfg.gan, seed, &ck)?, ck)
            }
            Stage::TrainMatcher => {
                let ck = dir.join("matcher.safetensors");
                with_ckpt(train_matcher_from_split(&self.split_dir(), &cfg.matcher, seed, &ck)?, ck)
            }
            Stage::BuildIndex => {
                let out = dir.join("index.bin");
                let matcher = self.dir(Stage::TrainMatcher).join("matcher.safetensors");
                with_ckpt(build_index_from_split(&matcher, &self.split_dir(), cfg.privacy.index_validation, &out)?, out)
            }
            Stage::Synthesize(kind) => {
                let generator = load_generator(&self.generator_checkpoint(kind))?;
                let m = synthesize_to_dir(
                    generator.as_ref(),
                    &self.dir(Stage::TrainMatcher).join("matcher.safetensors"),
                    &self.dir(Stage::BuildIndex).join("index.bin"),
                    &self.split_dir(),
                    &cfg.privacy,
                    seed,
                    &dir,
                )?;
                StageResult {
                    metrics: m,
                    checkpoint: Some(dir.join("dataset").join(CATALOG_FILE)),
                }
            }
            Stage::TrainClf(set, _) => {
                let ck = dir.join("classifier.safetensors");
                let (train, val) = self.training_catalogs(set);
                with_ckpt(train_clf_from_catalogs(&train, &val, &cfg.classifier, seed, &ck)?, ck)
            }
            Stage::Evaluate(set) => {
                let cks: Vec<PathBuf> = (0..cfg.num_classifier_runs)
                    .map(|r| self.dir(Stage::TrainClf(set, r)).join("classifier.safetensors"))
                    .collect();
                let record = evaluate_classifiers(set.tag(), &cks, &self.split_dir().join("test.csv"))?;
                let out = dir.join(EVALUATION_FILE);
                write_json(&out, &record)?;
                StageResult {
                    metrics: json!({ "runs": record.runs }),
                    checkpoint: None,
                }
            }
            Stage::Report => {
                let evals = TrainingSet::ALL
                    .iter()
                    .map(|&t| load_evaluation(&self.dir(Stage::Evaluate(t))))
                    .collect::<Result<Vec<_>>>()?;
                let (reports, rendered) = build_report(&evals)?;
                write_report(&dir, &reports, &rendered)?;
                info!("report:\n{}", rendered.text);
                StageResult {
                    metrics: json!({ "reports": reports }),
                    checkpoint: None,
                }
            }
        })
    }

    fn dependency_refs(&self, planned: &PlannedStage, manifest: &RunManifest) -> Option<Vec<DependencyRef>> {
        planned
            .dependencies
            .iter()
            .map(|d| {
                let rec = manifest.stage(d)?;
                (rec.status == StageStatus::Completed).then(|| DependencyRef {
                    stage: d.clone(),
                    digest: rec.digest.clone(),
                })
            })
            .collect()
    }

    /// The key the stage would run under, when every dependency is done.
    fn key(&self, planned: &PlannedStage, manifest: &RunManifest) -> Result<Option<(String, Vec<DependencyRef>)>> {
        match self.dependency_refs(planned, manifest) {
            Some(deps) => Ok(Some((
                manifest::stage_key(&planned.name, &planned.config_hash, planned.seed, &deps)?,
                deps,
            ))),
            None => Ok(None),
        }
    }

    fn is_cached(&self, planned: &PlannedStage, manifest: &RunManifest) -> Result<bool> {
        let Some((key, _)) = self.key(planned, manifest)? else {
            return Ok(false);
        };
        Ok(manifest.stage(&planned.name).is_some_and(|r| {
            r.status == StageStatus::Completed && r.key == key && outputs_intact(r, &self.run_dir)
        }))
    }

    /// Runs one stage into a fresh directory and builds its record.
    fn run_stage(&self, planned: &PlannedStage, key: String, deps: Vec<DependencyRef>) -> StageRecord {
        let dir = self.dir(planned.stage);
        let result = (|| {
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            info!("stage {}: running (seed {})", planned.name, planned.seed);
            let res = self.execute(planned)?;
            let outputs = hash_tree(&dir, &self.run_dir)?;
            Ok::<_, Error>((res, outputs))
        })();
        let mut record = StageRecord {
            name: planned.name.clone(),
            seed: planned.seed,
            config_hash: planned.config_hash.clone(),
            dependencies: deps,
            key,
            status: StageStatus::Failed,
            error: None,
            checkpoint: None,
            outputs: Vec::new(),
            digest: String::new(),
            metrics: Value::Null,
        };
        match result {
            Ok((res, outputs)) => {
                record.status = StageStatus::Completed;
                record.checkpoint = res
                    .checkpoint
                    .map(|p| p.strip_prefix(&self.run_dir).unwrap_or(&p).to_string_lossy().replace('\\', "/"));
                record.digest = manifest::outputs_digest(&outputs).unwrap_or_default();
                record.outputs = outputs;
                record.metrics = res.metrics;
            }
            Err(e) => record.error = Some(e.to_string()),
        }
        record
    }
}

fn open_manifest(cfg: &ExperimentConfig, run_dir: &Path) -> Result<RunManifest> {
    let path = run_dir.join(MANIFEST_FILE);
    let config_hash = hash_json(cfg)?;
    if path.exists() {
        let mut m = RunManifest::load(&path)?;
        if m.run_id != cfg.run_id {
            return Err(Error::Input(format!(
                "{} belongs to run {:?}, not {:?}",
                path.display(),
                m.run_id,
                cfg.run_id
            )));
        }
        m.base_seed = cfg.base_seed;
        m.config_hash = config_hash;
        m.config = serde_json::to_value(cfg)?;
        Ok(m)
    } else {
        Ok(RunManifest::new(&cfg.run_id, cfg.base_seed, config_hash, serde_json::to_value(cfg)?))
    }
}

/// Cached or pending status of every planned stage, assuming pending
/// stages invalidate everything downstream.
pub fn plan_status(cfg: &ExperimentConfig, out_root: &Path) -> Result<Vec<(PlannedStage, PlanStatus)>> {
    cfg.validate()?;
    let run_dir = out_root.join(&cfg.run_id);
    let manifest = if run_dir.join(MANIFEST_FILE).exists() {
        open_manifest(cfg, &run_dir)?
    } else {
        RunManifest::new(&cfg.run_id, cfg.base_seed, String::new(), Value::Null)
    };
    let runner = Runner { cfg, run_dir };
    let mut pending: Vec<String> = Vec::new();
    let mut out = Vec::new();
    for p in plan_stages(cfg)? {
        let blocked = p.dependencies.iter().any(|d| pending.contains(d));
        let status = if !blocked && runner.is_cached(&p, &manifest)? {
            PlanStatus::Cached
        } else {
            pending.push(p.name.clone());
            PlanStatus::Pending
        };
        out.push((p, status));
    }
    Ok(out)
}

/// Runs (or resumes) the whole experiment under `out_root/run_id`.
/// Classifier trainings fan out over `workers` threads.
pub fn run_pipeline(cfg: &ExperimentConfig, out_root: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let run_dir = out_root.join(&cfg.run_id);
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let manifest_path = run_dir.join(MANIFEST_FILE);
    let mut manifest = open_manifest(cfg, &run_dir)?;
    let plan = plan_stages(cfg)?;
    let runner = Runner {
        cfg,
        run_dir: run_dir.clone(),
    };
    let mut executed = Vec::new();
    let mut skipped = Vec::new();

    let mut i = 0;
    while i < plan.len() {
        // consecutive classifier trainings form one parallel group
        let mut j = i + 1;
        if matches!(plan[i].stage, Stage::TrainClf(..)) {
            while j < plan.len() && matches!(plan[j].stage, Stage::TrainClf(..)) {
                j += 1;
            }
        }
        let mut todo = Vec::new();
        for p in &plan[i..j] {
            if runner.is_cached(p, &manifest)? {
                info!("stage {}: cached", p.name);
                skipped.push(p.name.clone());
            } else {
                let (key, deps) = runner
                    .key(p, &manifest)?
                    .ok_or_else(|| Error::State(format!("stage {} has unfinished dependencies", p.name)))?;
                todo.push((p, key, deps));
            }
        }
        let records = run_group(&runner, todo, cfg.workers);
        for record in records {
            let failed = record.status == StageStatus::Failed;
            let name = record.name.clone();
            let error = record.error.clone();
            manifest.upsert(record);
            manifest.save(&manifest_path)?;
            if failed {
                return Err(Error::Stage {
                    stage: name,
                    source: Box::new(Error::Training(error.unwrap_or_default())),
                });
            }
            executed.push(name);
        }
        i = j;
    }

    let report = manifest
        .stage(&Stage::Report.name())
        .ok_or_else(|| Error::State("report stage missing from manifest".into()))?;
    manifest.reports = serde_json::from_value(report.metrics["reports"].clone())?;
    let order: Vec<String> = plan.iter().map(|p| p.name.clone()).collect();
    manifest.stages.retain(|s| order.contains(&s.name));
    manifest
        .stages
        .sort_by_key(|s| order.iter().position(|n| *n == s.name));
    manifest.save(&manifest_path)?;
    Ok(RunOutcome {
        run_dir,
        manifest,
        executed,
        skipped,
    })
}

/// Runs the stages of a group, at most `workers` at a time, returning
/// records in input order.
fn run_group(runner: &Runner, todo: Vec<(&PlannedStage, String, Vec<DependencyRef>)>, workers: usize) -> Vec<StageRecord> {
    if todo.len() <= 1 || workers <= 1 {
        let mut out = Vec::new();
        for (p, key, deps) in todo {
            let rec = runner.run_stage(p, key, deps);
            let failed = rec.status == StageStatus::Failed;
            out.push(rec);
            if failed {
                break;
            }
        }
        return out;
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<StageRecord>>> = Mutex::new(vec![None; todo.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers.min(todo.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((p, key, deps)) = todo.get(i) else { break };
                let rec = runner.run_stage(p, key.clone(), deps.clone());
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(rec);
            });
        }
    });
    slots.into_inner().expect("workers joined").into_iter().flatten().collect()
}
