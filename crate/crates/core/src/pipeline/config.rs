use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierConfig;
use crate::curation::CurationConfig;
use crate::diffusion::DiffusionConfig;
use crate::error::{ConfigIssue, Error, Result};
use crate::matcher::{MatcherConfig, DEFAULT_THRESHOLD};
use crate::pggan::GanConfig;
use crate::privacy::DEFAULT_ATTEMPTS_FACTOR;
use crate::toy::ToySpec;
use crate::vae::AutoencoderConfig;

/// Where the radiographs come from: a generated toy corpus, or a metadata
/// CSV plus image directory. A written `[data]` table has no toy corpus
/// unless it names one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Resolution every image is loaded at.
    pub image_size: usize,
    #[serde(default)]
    pub toy: Option<ToySpec>,
    pub metadata: Option<PathBuf>,
    pub image_root: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            toy: Some(ToySpec::default()),
            metadata: None,
            image_root: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub vae_epochs: usize,
    pub diffusion_max_epochs: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            vae_epochs: 20,
            diffusion_max_epochs: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyConfig {
    pub threshold: f64,
    pub max_attempts_factor: f64,
    /// Candidates generated and matched per call.
    pub batch_size: usize,
    /// Index validation images alongside the training images; off restricts
    /// the filter to the training subset.
    pub index_validation: bool,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            max_attempts_factor: DEFAULT_ATTEMPTS_FACTOR,
            batch_size: 64,
            index_validation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub base_seed: u64,
    pub num_classifier_runs: usize,
    /// Concurrent classifier trainings.
    pub workers: usize,
    pub data: DataConfig,
    pub curation: CurationConfig,
    pub training: TrainingConfig,
    pub vae: AutoencoderConfig,
    pub diffusion: DiffusionConfig,
    pub gan: GanConfig,
    pub matcher: MatcherConfig,
    pub privacy: PrivacyConfig,
    pub classifier: ClassifierConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: "toy".into(),
            base_seed: 0,
            num_classifier_runs: 10,
            workers: 1,
            data: DataConfig::default(),
            curation: CurationConfig::default(),
            training: TrainingConfig::default(),
            vae: AutoencoderConfig::toy(),
            diffusion: DiffusionConfig::toy(),
            gan: GanConfig::default(),
            matcher: MatcherConfig::default(),
            privacy: PrivacyConfig::default(),
            classifier: ClassifierConfig::toy(),
        }
    }
}

impl ExperimentConfig {
    /// Full-scale settings over a ChestX-ray14 style catalog under `data/`.
    pub fn reference() -> Self {
        Self {
            run_id: "reference".into(),
            data: DataConfig {
                image_size: 256,
                toy: None,
                metadata: Some("data/Data_Entry_2017.csv".into()),
                image_root: Some("data/images".into()),
            },
            training: TrainingConfig {
                vae_epochs: 100,
                diffusion_max_epochs: 1000,
            },
            vae: AutoencoderConfig::reference(),
            diffusion: DiffusionConfig::reference(),
            gan: GanConfig::reference(),
            classifier: ClassifierConfig::reference(),
            ..Self::default()
        }
    }
}

fn is_pow2(n: usize) -> bool {
    n > 0 && n.is_power_of_two()
}

impl ExperimentConfig {
    /// Every problem found, never just the first.
    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut push = |f: &str, m: String| out.push(ConfigIssue::new(f, m));
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            || self.run_id.starts_with('.')
        {
            push("run_id", "must be a non-empty name of letters, digits, '-', '_' or '.'".into());
        }
        if self.num_classifier_runs == 0 {
            push("num_classifier_runs", "must be positive".into());
        }
        if self.workers == 0 {
            push("workers", "must be positive".into());
        }
        let size = self.data.image_size;
        if !is_pow2(size) {
            push("data.image_size", format!("must be a power of two, got {size}"));
        }
        match (&self.data.toy, &self.data.metadata, &self.data.image_root) {
            (Some(toy), None, None) => {
                if toy.image_size != size {
                    push(
                        "data.toy.image_size",
                        format!("must equal data.image_size ({size}), got {}", toy.image_size),
                    );
                }
            }
            (None, Some(_), Some(_)) => {}
            (None, _, _) => push("data", "set both metadata and image_root, or a toy table".into()),
            (Some(_), _, _) => push("data", "a toy table excludes metadata and image_root".into()),
        }
        if self.vae.image_size != size {
            push(
                "vae.image_size",
                format!("must equal data.image_size ({size}), got {}", self.vae.image_size),
            );
        }
        if self.gan.growth.target_resolution != size {
            push(
                "gan.growth.target_resolution",
                format!(
                    "must equal data.image_size ({size}), got {}",
                    self.gan.growth.target_resolution
                ),
            );
        }
        if self.matcher.input_size > size {
            push("matcher.input_size", format!("must not exceed data.image_size ({size})"));
        }
        if self.training.vae_epochs == 0 {
            push("training.vae_epochs", "must be positive".into());
        }
        if self.training.diffusion_max_epochs == 0 {
            push("training.diffusion_max_epochs", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.privacy.threshold) {
            push(
                "privacy.threshold",
                format!("must lie in [0, 1], got {}", self.privacy.threshold),
            );
        }
        if !(self.privacy.max_attempts_factor >= 1.0) {
            push("privacy.max_attempts_factor", "must be at least 1".into());
        }
        if self.privacy.batch_size == 0 {
            push("privacy.batch_size", "must be positive".into());
        }
        if let Some(toy) = &self.data.toy {
            out.extend(toy.issues("data.toy."));
        }
        out.extend(self.curation.issues("curation."));
        out.extend(self.vae.issues("vae"));
        out.extend(self.diffusion.issues("diffusion"));
        out.extend(self.gan.issues("gan"));
        out.extend(self.matcher.issues("matcher"));
        out.extend(self.classifier.issues("classifier"));
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }
}

fn config_error(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config(vec![ConfigIssue::new(field, message)])
}

/// Deep merge: tables merge key by key, anything else in `top` replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Reads `path`, merging the files named in its `include` array first
/// (relative to the including file) so the including file wins.
fn read_with_includes(path: &Path, stack: &mut Vec<PathBuf>) -> Result<toml::Table> {
    let canonical = fs::canonicalize(path).map_err(|e| Error::io(path, e))?;
    if stack.contains(&canonical) {
        return Err(config_error("include", format!("include cycle through {}", path.display())));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| config_error(path.display().to_string(), e.message().to_string()))?;
    let includes = match table.remove("include") {
        None => Vec::new(),
        Some(toml::Value::Array(items)) => items
            .into_iter()
            .map(|v| match v {
                toml::Value::String(s) => Ok(s),
                _ => Err(config_error("include", "entries must be file paths")),
            })
            .collect::<Result<Vec<_>>>()?,
        Some(_) => return Err(config_error("include", "must be an array of file paths")),
    };
    stack.push(canonical);
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut merged = toml::Table::new();
    for inc in includes {
        merge(&mut merged, read_with_includes(&dir.join(inc), stack)?);
    }
    stack.pop();
    merge(&mut merged, table);
    Ok(merged)
}

/// Parses a TOML experiment file with includes. Relative data paths are
/// resolved against the file's directory. No cross-field checks.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let table = read_with_includes(path, &mut Vec::new())?;
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let field = e.path().to_string();
        config_error(if field == "." { "<root>".into() } else { field }, e.into_inner().message().to_string())
    })?;
    let dir = path.parent().unwrap_or(Path::new("."));
    for p in [&mut cfg.data.metadata, &mut cfg.data.image_root].into_iter().flatten() {
        if p.is_relative() {
            *p = dir.join(&*p);
        }
    }
    Ok(cfg)
}

/// [`load_config`] followed by the aggregated cross-field checks.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig> {
    let cfg = load_config(path)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fields(e: Error) -> Vec<String> {
        match e {
            Error::Config(issues) => issues.into_iter().map(|i| i.field).collect(),
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn errors_are_aggregated_with_field_paths() {
        let mut cfg = ExperimentConfig::default();
        cfg.curation.split_ratio = [0.7, 0.1, 0.25];
        cfg.privacy.threshold = 1.5;
        cfg.gan.growth.target_resolution = 64;
        let f = fields(cfg.validate().unwrap_err());
        assert!(f.contains(&"curation.split_ratio".to_string()), "{f:?}");
        assert!(f.contains(&"privacy.threshold".to_string()), "{f:?}");
        assert!(f.contains(&"gan.growth.target_resolution".to_string()), "{f:?}");
    }

    #[test]
    fn includes_merge_with_the_including_file_winning() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("base.toml"),
            "base_seed = 7\nnum_classifier_runs = 4\n[privacy]\nthreshold = 0.3\nbatch_size = 8\n",
        )
        .unwrap();
        fs::write(
            dir.path().join("exp.toml"),
            "include = [\"base.toml\"]\nrun_id = \"x\"\n[privacy]\nthreshold = 0.4\n",
        )
        .unwrap();
        let cfg = validate_config(&dir.path().join("exp.toml")).unwrap();
        assert_eq!(cfg.base_seed, 7);
        assert_eq!(cfg.run_id, "x");
        assert_eq!(cfg.privacy.threshold, 0.4);
        assert_eq!(cfg.privacy.batch_size, 8);
    }

    #[test]
    fn include_cycles_and_unknown_fields_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.toml"), "include = [\"b.toml\"]\n").unwrap();
        fs::write(dir.path().join("b.toml"), "include = [\"a.toml\"]\n").unwrap();
        assert_eq!(fields(load_config(&dir.path().join("a.toml")).unwrap_err()), ["include"]);

        fs::write(dir.path().join("c.toml"), "[privacy]\nthreshhold = 0.5\n").unwrap();
        let f = fields(load_config(&dir.path().join("c.toml")).unwrap_err());
        assert!(f[0].starts_with("privacy"), "{f:?}");
    }
}

#[cfg(test)]
mod fixtures {
    use super::*;

    fn fixture(name: &str) -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
    }

    #[test]
    fn shipped_configs_validate_and_match_presets() {
        let toy = validate_config(&fixture("toy.toml")).unwrap();
        assert_eq!(toy, ExperimentConfig::default());

        let path = fixture("reference.toml");
        let mut reference = validate_config(&path).unwrap();
        let dir = path.parent().unwrap();
        for p in [&mut reference.data.metadata, &mut reference.data.image_root].into_iter().flatten() {
            *p = p.strip_prefix(dir).unwrap().to_path_buf();
        }
        assert_eq!(reference, ExperimentConfig::reference());
    }
}
