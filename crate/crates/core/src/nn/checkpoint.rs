//! Versioned checkpoint container shared by every model.
//!
//! A checkpoint is a safetensors file. Its single metadata entry,
//! `privsynth`, holds a JSON header with the format version, the checkpoint
//! kind, and one metadata object per section (config echo, epoch, validation
//! loss, ...). Tensor names are prefixed with their section, `vae/...`,
//! `ldm/...`, so one file can carry several models.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const HEADER_KEY: &str = "privsynth";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: String,
    pub sections: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                kind: kind.to_string(),
                sections: BTreeMap::new(),
            },
            tensors: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> &str {
        &self.header.kind
    }

    /// Adds a section's metadata and every tensor of `store` under it.
    pub fn add_section(&mut self, section: &str, meta: &impl Serialize, store: &ParamStore) -> Result<()> {
        self.header
            .sections
            .insert(section.to_string(), serde_json::to_value(meta)?);
        for (name, t) in store.tensors() {
            self.tensors.insert(format!("{section}/{name}"), t);
        }
        Ok(())
    }

    pub fn add_tensor(&mut self, section: &str, name: &str, t: Tensor) {
        self.tensors.insert(format!("{section}/{name}"), t);
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.header.sections.contains_key(section)
    }

    pub fn section_meta<T: DeserializeOwned>(&self, section: &str) -> Result<T> {
        let v = self
            .header
            .sections
            .get(section)
            .ok_or_else(|| Error::Checkpoint(format!("no section {section:?}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn tensor(&self, section: &str, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(&format!("{section}/{name}"))
            .ok_or_else(|| Error::Checkpoint(format!("no tensor {section}/{name}")))
    }

    /// Tensors of one section with the prefix stripped.
    pub fn section_tensors(&self, section: &str) -> BTreeMap<String, Tensor> {
        let prefix = format!("{section}/");
        self.tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(&prefix).map(|n| (n.to_string(), t.clone())))
            .collect()
    }

    pub fn load_into(&self, section: &str, store: &ParamStore) -> Result<()> {
        store.restore(&self.section_tensors(section))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = HashMap::new();
        meta.insert(HEADER_KEY.to_string(), serde_json::to_string(&self.header)?);
        let data: Vec<(&String, &Tensor)> = self.tensors.iter().collect();
        safetensors::tensor::serialize(data, Some(meta))
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, metadata) = safetensors::SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let header_json = metadata
            .metadata()
            .as_ref()
            .and_then(|m| m.get(HEADER_KEY))
            .ok_or_else(|| Error::Checkpoint("missing privsynth header".into()))?;
        let header: CheckpointHeader = serde_json::from_str(header_json)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?
            .into_iter()
            .collect();
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks the kind.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.kind() != kind {
            return Err(Error::Checkpoint(format!(
                "{} is a {:?} checkpoint, expected {kind:?}",
                path.display(),
                ck.kind()
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Linear;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Meta {
        epoch: usize,
        val_loss: f64,
    }

    #[test]
    fn save_load_restores_weights_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let src = ParamStore::new(1);
        Linear::new(&src.root().pp("fc"), 3, 2).unwrap();
        let mut ck = Checkpoint::new("test");
        ck.add_section("net", &Meta { epoch: 4, val_loss: 0.25 }, &src).unwrap();
        let path = dir.path().join("a.ckpt");
        ck.save(&path).unwrap();

        let back = Checkpoint::load_kind(&path, "test").unwrap();
        assert_eq!(back.section_meta::<Meta>("net").unwrap(), Meta { epoch: 4, val_loss: 0.25 });
        let dst = ParamStore::new(2);
        let fc = Linear::new(&dst.root().pp("fc"), 3, 2).unwrap();
        back.load_into("net", &dst).unwrap();
        assert_eq!(
            fc.weight.to_vec2::<f32>().unwrap(),
            src.tensors()["fc.weight"].to_vec2::<f32>().unwrap()
        );
        assert!(Checkpoint::load_kind(&path, "other").is_err());
    }

    #[test]
    fn serialization_is_deterministic() {
        let s = ParamStore::new(3);
        Linear::new(&s.root().pp("a"), 2, 2).unwrap();
        Linear::new(&s.root().pp("b"), 2, 2).unwrap();
        let mut ck = Checkpoint::new("t");
        ck.add_section("x", &Meta { epoch: 1, val_loss: 1.0 }, &s).unwrap();
        ck.add_section("y", &Meta { epoch: 2, val_loss: 2.0 }, &s).unwrap();
        assert_eq!(ck.to_bytes().unwrap(), ck.to_bytes().unwrap());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut ck = Checkpoint::new("t");
        ck.header.format_version = 99;
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }
}
