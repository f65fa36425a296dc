use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::eval::AucReport;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a value's canonical JSON form.
pub fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

/// A file written by a stage; `path` is relative to the run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyRef {
    pub stage: String,
    pub digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub dependencies: Vec<DependencyRef>,
    /// Hash of name, config hash, seed and dependency digests; a completed
    /// record with the same key and intact outputs is reused.
    pub key: String,
    pub status: StageStatus,
    pub error: Option<String>,
    pub checkpoint: Option<String>,
    pub outputs: Vec<Artifact>,
    /// Hash over the output list.
    pub digest: String,
    pub metrics: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub base_seed: u64,
    pub config_hash: String,
    /// The resolved configuration, every hyperparameter by name.
    #[serde(default)]
    pub config: serde_json::Value,
    pub stages: Vec<StageRecord>,
    pub reports: Vec<AucReport>,
}

impl RunManifest {
    pub fn new(run_id: &str, base_seed: u64, config_hash: String, config: serde_json::Value) -> Self {
        Self {
            run_id: run_id.to_string(),
            base_seed,
            config_hash,
            config,
            stages: Vec::new(),
            reports: Vec::new(),
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn upsert(&mut self, record: StageRecord) {
        match self.stages.iter_mut().find(|s| s.name == record.name) {
            Some(slot) => *slot = record,
            None => self.stages.push(record),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Written through a temporary file so a crash never leaves a torn manifest.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

pub fn stage_key(name: &str, config_hash: &str, seed: u64, deps: &[DependencyRef]) -> Result<String> {
    hash_json(&(name, config_hash, seed, deps))
}

pub fn outputs_digest(outputs: &[Artifact]) -> Result<String> {
    hash_json(&outputs)
}

fn relative(path: &Path, root: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Every file under `dir`, sorted, hashed, with paths relative to `root`.
pub fn hash_tree(dir: &Path, root: &Path) -> Result<Vec<Artifact>> {
    let mut out = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::io(dir, e.into()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let bytes = fs::read(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        out.push(Artifact {
            path: relative(entry.path(), root),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
    }
    Ok(out)
}

/// True when every listed output exists with its recorded hash.
pub fn outputs_intact(record: &StageRecord, root: &Path) -> bool {
    record.outputs.iter().all(|a| {
        fs::read(root.join(&a.path))
            .map(|b| b.len() as u64 == a.bytes && sha256_hex(&b) == a.sha256)
            .unwrap_or(false)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_hashes_are_sorted_relative_and_detect_edits() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("stage");
        fs::create_dir_all(dir.join("sub")).unwrap();
        fs::write(dir.join("b.txt"), "b").unwrap();
        fs::write(dir.join("sub/a.txt"), "a").unwrap();
        let arts = hash_tree(&dir, root.path()).unwrap();
        let paths: Vec<&str> = arts.iter().map(|a| a.path.as_str()).collect();
        assert_eq!(paths, ["stage/b.txt", "stage/sub/a.txt"]);
        assert_eq!(arts[0].sha256, sha256_hex(b"b"));

        let record = StageRecord {
            name: "stage".into(),
            seed: 0,
            config_hash: String::new(),
            dependencies: vec![],
            key: String::new(),
            status: StageStatus::Completed,
            error: None,
            checkpoint: None,
            digest: outputs_digest(&arts).unwrap(),
            outputs: arts,
            metrics: serde_json::Value::Null,
        };
        assert!(outputs_intact(&record, root.path()));
        fs::write(dir.join("b.txt"), "c").unwrap();
        assert!(!outputs_intact(&record, root.path()));
    }

    #[test]
    fn keys_depend_on_every_ingredient() {
        let d = vec![DependencyRef {
            stage: "a".into(),
            digest: "x".into(),
        }];
        let k = stage_key("s", "h", 1, &d).unwrap();
        assert_eq!(k, stage_key("s", "h", 1, &d).unwrap());
        assert_ne!(k, stage_key("s", "h", 2, &d).unwrap());
        assert_ne!(k, stage_key("s", "g", 1, &d).unwrap());
        assert_ne!(k, stage_key("s", "h", 1, &[]).unwrap());
    }
}
