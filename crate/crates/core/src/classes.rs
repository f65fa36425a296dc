//! The fixed label vocabulary: fourteen thoracic abnormalities plus the
//! healthy "No Finding" class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of conditioning classes (abnormalities + No Finding).
pub const NUM_CLASSES: usize = 15;
/// Number of classifier outputs. No Finding is the all-zeros target.
pub const NUM_ABNORMALITIES: usize = 14;
/// Index of the healthy class.
pub const NO_FINDING: usize = 14;

/// Display names, indexed by class index.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Effusion",
    "Emphysema",
    "Fibrosis",
    "Hernia",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pleural Thickening",
    "Pneumonia",
    "Pneumothorax",
    "No Finding",
];

/// Resolves a label as written in metadata. Underscores and case are
/// tolerated so `Pleural_Thickening` and `no finding` both resolve.
pub fn class_index(name: &str) -> Option<usize> {
    let norm = |s: &str| s.trim().replace('_', " ").to_ascii_lowercase();
    let wanted = norm(name);
    CLASS_NAMES.iter().position(|c| norm(c) == wanted)
}

pub fn class_name(index: usize) -> &'static str {
    CLASS_NAMES[index]
}

/// Metadata spelling (underscored), as used by the public CSV.
pub fn metadata_label(index: usize) -> String {
    CLASS_NAMES[index].replace(' ', "_")
}

/// A single conditioning class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassCondition {
    index: usize,
}

impl ClassCondition {
    pub fn new(index: usize) -> Result<Self> {
        if index >= NUM_CLASSES {
            return Err(Error::Input(format!(
                "class index {index} out of range 0..{NUM_CLASSES}"
            )));
        }
        Ok(Self { index })
    }

    pub fn from_name(name: &str) -> Result<Self> {
        class_index(name)
            .map(|index| Self { index })
            .ok_or_else(|| Error::Input(format!("unknown class {name:?}")))
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn name(&self) -> &'static str {
        CLASS_NAMES[self.index]
    }

    pub fn one_hot(&self) -> [f32; NUM_CLASSES] {
        let mut v = [0f32; NUM_CLASSES];
        v[self.index] = 1.0;
        v
    }

    /// Classifier target: one-hot over abnormalities, all zeros for No Finding.
    pub fn multi_hot_target(&self) -> [f32; NUM_ABNORMALITIES] {
        let mut v = [0f32; NUM_ABNORMALITIES];
        if self.index < NUM_ABNORMALITIES {
            v[self.index] = 1.0;
        }
        v
    }
}
