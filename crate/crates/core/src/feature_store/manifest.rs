use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{McdError, Result};

use super::format::read_sample;
use super::FeatureBundle;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRUTH_FILE: &str = "truth.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = McdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(McdError::Config(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

/// Which modality family a question type belongs to, for scenario averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "A")]
    Audio,
    #[serde(rename = "V")]
    Visual,
    #[serde(rename = "AV")]
    AudioVisual,
}

impl Scenario {
    pub fn label(self) -> &'static str {
        match self {
            Self::Audio => "A-avg",
            Self::Visual => "V-avg",
            Self::AudioVisual => "AV-avg",
        }
    }

    /// Guess from a type name prefix such as `audio-count` or `av-temporal`.
    pub fn infer(name: &str) -> Option<Self> {
        let lower = name.to_ascii_lowercase();
        if lower.starts_with("av") || lower.starts_with("audio-visual") || lower.starts_with("audiovisual") {
            Some(Self::AudioVisual)
        } else if lower.starts_with("audio") || lower.starts_with("a-") {
            Some(Self::Audio)
        } else if lower.starts_with("visual") || lower.starts_with("v-") {
            Some(Self::Visual)
        } else {
            None
        }
    }

    pub fn uses_audio(self) -> bool {
        matches!(self, Self::Audio | Self::AudioVisual)
    }

    pub fn uses_visual(self) -> bool {
        matches!(self, Self::Visual | Self::AudioVisual)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSizes {
    pub token: usize,
    #[serde(rename = "type")]
    pub question_type: usize,
    pub keyword: usize,
    pub answer: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub sample_id: String,
    pub path: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub dim: usize,
    pub vocab_sizes: VocabSizes,
    pub question_type_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub question_type_scenarios: Vec<Scenario>,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn scenario_of(&self, type_id: usize) -> Option<Scenario> {
        self.question_type_scenarios
            .get(type_id)
            .copied()
            .or_else(|| self.question_type_names.get(type_id).and_then(|n| Scenario::infer(n)))
    }

    pub fn validate_shape(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(McdError::Manifest(format!("unsupported version {}", self.version)));
        }
        if self.dim == 0 {
            return Err(McdError::Manifest("dim must be positive".into()));
        }
        if self.question_type_names.len() != self.vocab_sizes.question_type {
            return Err(McdError::Manifest(format!(
                "{} question type names for {} types",
                self.question_type_names.len(),
                self.vocab_sizes.question_type
            )));
        }
        if !self.question_type_scenarios.is_empty()
            && self.question_type_scenarios.len() != self.question_type_names.len()
        {
            return Err(McdError::Manifest("question_type_scenarios length mismatch".into()));
        }
        if self.vocab_sizes.answer < 2 {
            return Err(McdError::Manifest("need at least two answer classes".into()));
        }
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.sample_id.as_str()) {
                return Err(McdError::Manifest(format!("duplicate sample id {}", s.sample_id)));
            }
        }
        Ok(())
    }

    /// Checks a bundle against the declared dimension and vocabularies.
    pub fn check_bundle(&self, b: &FeatureBundle) -> Result<()> {
        let bad = |field: &'static str, reason: String| McdError::InvalidSample {
            sample_id: b.sample_id.clone(),
            field,
            reason,
        };
        if b.visual.cols != self.dim || b.audio.cols != self.dim {
            return Err(bad(
                "features",
                format!("width {}/{} != manifest dim {}", b.visual.cols, b.audio.cols, self.dim),
            ));
        }
        let v = &self.vocab_sizes;
        if let Some(t) = b.question_tokens.iter().find(|&&t| t as usize >= v.token) {
            return Err(bad("question_tokens", format!("token {t} >= vocabulary {}", v.token)));
        }
        if b.type_id as usize >= v.question_type {
            return Err(bad("type_id", format!("{} >= {}", b.type_id, v.question_type)));
        }
        if let Some(k) = b.keyword_ids.iter().find(|&&k| k as usize >= v.keyword) {
            return Err(bad("keyword_ids", format!("keyword {k} >= vocabulary {}", v.keyword)));
        }
        if b.answer_id as usize >= v.answer {
            return Err(bad("answer_id", format!("{} >= {}", b.answer_id, v.answer)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub event_frame: usize,
    pub class: usize,
}

pub type TruthTable = BTreeMap<String, TruthEntry>;

pub fn read_truth(dir: &Path) -> Result<TruthTable> {
    let path = dir.join(TRUTH_FILE);
    let text = fs::read_to_string(&path).map_err(|e| McdError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| McdError::json(&path, e))
}

/// A fully loaded and validated dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub samples: Vec<FeatureBundle>,
    splits: Vec<Split>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| McdError::io(&path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| McdError::json(&path, e))?;
        manifest.validate_shape()?;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        let mut splits = Vec::with_capacity(manifest.samples.len());
        for entry in &manifest.samples {
            let bundle = read_sample(&dir.join(&entry.path))?;
            if bundle.sample_id != entry.sample_id {
                return Err(McdError::Manifest(format!(
                    "{} contains sample {} but is indexed as {}",
                    entry.path.display(),
                    bundle.sample_id,
                    entry.sample_id
                )));
            }
            manifest.check_bundle(&bundle)?;
            samples.push(bundle);
            splits.push(entry.split);
        }
        Ok(Self {
            root: dir.to_path_buf(),
            manifest,
            samples,
            splits,
        })
    }

    /// Builds an in-memory dataset (used by tests and the C API).
    pub fn from_parts(manifest: DatasetManifest, samples: Vec<FeatureBundle>) -> Result<Self> {
        manifest.validate_shape()?;
        if manifest.samples.len() != samples.len() {
            return Err(McdError::Manifest("sample count mismatch".into()));
        }
        let mut splits = Vec::with_capacity(samples.len());
        for (entry, b) in manifest.samples.iter().zip(&samples) {
            if entry.sample_id != b.sample_id {
                return Err(McdError::Manifest(format!("id mismatch for {}", b.sample_id)));
            }
            b.validate()?;
            manifest.check_bundle(b)?;
            splits.push(entry.split);
        }
        Ok(Self {
            root: PathBuf::new(),
            manifest,
            samples,
            splits,
        })
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn split_of(&self, index: usize) -> Split {
        self.splits[index]
    }

    pub fn num_answers(&self) -> usize {
        self.manifest.vocab_sizes.answer
    }
}
