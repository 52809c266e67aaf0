//! Deterministic planted-clue datasets.
//!
//! Every sample has one event frame `t*` shared by both modalities. The
//! visual and audio rows at `t*` are a class prototype plus Gaussian noise;
//! every other row is pure noise. The question names one of three types
//! through a fixed three-token template followed by one keyword token, and
//! the answer is `(class + type_id) mod n_answer_classes`. Answers are dealt
//! round-robin before shuffling so each split is balanced to within one
//! sample per class, and neither the type nor the keyword says anything
//! about the answer on its own.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{McdError, Result};
use crate::json::write_json_pretty;
use crate::rng::Rng;

use super::format::write_sample;
use super::manifest::{
    DatasetManifest, SampleEntry, Scenario, Split, TruthEntry, VocabSizes, MANIFEST_FILE,
    MANIFEST_VERSION, TRUTH_FILE,
};
use super::{FeatureBundle, FeatureMatrix};

pub const QUESTION_TYPES: [&str; 3] = ["audio-count", "visual-class", "av-temporal"];
pub const SCENARIOS: [Scenario; 3] = [Scenario::Audio, Scenario::Visual, Scenario::AudioVisual];
/// Token 0 is padding, tokens `1..=9` are the three-token templates.
pub const TEMPLATE_TOKENS: usize = 3;
const FIRST_KEYWORD_TOKEN: u32 = 1 + (QUESTION_TYPES.len() * TEMPLATE_TOKENS) as u32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Total samples across all splits.
    pub n_samples: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Frames per modality.
    pub frames: usize,
    pub dim: usize,
    pub n_answer_classes: usize,
    pub n_keywords: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 7000,
            n_val: 1000,
            n_test: 1000,
            frames: 12,
            dim: 64,
            n_answer_classes: 8,
            n_keywords: 4,
            noise_sigma: 0.5,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn n_train(&self) -> usize {
        self.n_samples - self.n_val - self.n_test
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(McdError::Config(format!("synthetic spec: {m}")));
        if self.n_answer_classes < 2 {
            return err("n_answer_classes must be at least 2");
        }
        if self.frames < 2 {
            return err("frames must be at least 2");
        }
        if self.dim == 0 {
            return err("dim must be positive");
        }
        if self.n_keywords == 0 {
            return err("n_keywords must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return err("noise_sigma must be a finite non-negative number");
        }
        if self.n_val + self.n_test > self.n_samples {
            return err("n_val + n_test exceeds n_samples");
        }
        if self.n_train() == 0 {
            return err("no training samples left");
        }
        Ok(())
    }
}

pub fn answer_for(type_id: usize, class: usize, n_classes: usize) -> usize {
    (class + type_id) % n_classes
}

fn class_for(type_id: usize, answer: usize, n_classes: usize) -> usize {
    (answer + n_classes - type_id % n_classes) % n_classes
}

pub fn template_tokens(type_id: usize) -> Vec<u32> {
    (0..TEMPLATE_TOKENS)
        .map(|i| 1 + (type_id * TEMPLATE_TOKENS + i) as u32)
        .collect()
}

/// Generated content before it touches the file system.
pub struct SyntheticData {
    pub manifest: DatasetManifest,
    pub samples: Vec<FeatureBundle>,
    pub truth: BTreeMap<String, TruthEntry>,
}

pub fn generate_in_memory(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let (c, d, k) = (spec.n_answer_classes, spec.dim, spec.frames);
    let prototypes = |rng: &mut Rng| -> Vec<Vec<f64>> {
        (0..c).map(|_| (0..d).map(|_| rng.standard_normal()).collect()).collect()
    };
    let visual_protos = prototypes(&mut rng);
    let audio_protos = prototypes(&mut rng);

    let mut samples = Vec::with_capacity(spec.n_samples);
    let mut entries = Vec::with_capacity(spec.n_samples);
    let mut truth = BTreeMap::new();
    for (split, count) in [
        (Split::Train, spec.n_train()),
        (Split::Val, spec.n_val),
        (Split::Test, spec.n_test),
    ] {
        if count % c != 0 {
            log::warn!(
                "{split} split of {count} samples is not a multiple of {c} classes; \
                 balancing to within one sample per class"
            );
        }
        let mut answers: Vec<usize> = (0..count).map(|i| i % c).collect();
        rng.shuffle(&mut answers);
        for (i, &answer) in answers.iter().enumerate() {
            let type_id = rng.below(QUESTION_TYPES.len());
            let keyword = rng.below(spec.n_keywords);
            let event = rng.below(k);
            let class = class_for(type_id, answer, c);
            debug_assert_eq!(answer_for(type_id, class, c), answer);
            let stream = |rng: &mut Rng, protos: &[Vec<f64>]| {
                let mut data = Vec::with_capacity(k * d);
                for t in 0..k {
                    for j in 0..d {
                        let base = if t == event { protos[class][j] } else { 0.0 };
                        data.push((base + spec.noise_sigma * rng.standard_normal()) as f32);
                    }
                }
                FeatureMatrix::new(k, d, data)
            };
            let visual = stream(&mut rng, &visual_protos);
            let audio = stream(&mut rng, &audio_protos);
            let sample_id = format!("{split}-{i:06}");
            let mut question_tokens = template_tokens(type_id);
            question_tokens.push(FIRST_KEYWORD_TOKEN + keyword as u32);
            truth.insert(
                sample_id.clone(),
                TruthEntry {
                    event_frame: event,
                    class,
                },
            );
            entries.push(SampleEntry {
                sample_id: sample_id.clone(),
                path: format!("samples/{sample_id}.mcdf").into(),
                split,
            });
            samples.push(FeatureBundle {
                sample_id,
                visual,
                audio,
                question_tokens,
                type_id: type_id as u32,
                keyword_ids: vec![keyword as u32],
                answer_id: answer as u32,
            });
        }
    }

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        dim: d,
        vocab_sizes: VocabSizes {
            token: FIRST_KEYWORD_TOKEN as usize + spec.n_keywords,
            question_type: QUESTION_TYPES.len(),
            keyword: spec.n_keywords,
            answer: c,
        },
        question_type_names: QUESTION_TYPES.iter().map(|s| s.to_string()).collect(),
        question_type_scenarios: SCENARIOS.to_vec(),
        samples: entries,
    };
    Ok(SyntheticData {
        manifest,
        samples,
        truth,
    })
}

/// Writes `manifest.json`, `truth.json` and `samples/*.mcdf` under `out_dir`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let data = generate_in_memory(spec)?;
    let sample_dir = out_dir.join("samples");
    fs::create_dir_all(&sample_dir).map_err(|e| McdError::io(&sample_dir, e))?;
    for b in &data.samples {
        write_sample(b, &sample_dir)?;
    }
    write_json_pretty(&out_dir.join(MANIFEST_FILE), &data.manifest)?;
    write_json_pretty(&out_dir.join(TRUTH_FILE), &data.truth)?;
    Ok(data.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::Dataset;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_samples: 130,
            n_val: 20,
            n_test: 21,
            frames: 5,
            dim: 6,
            n_answer_classes: 4,
            n_keywords: 3,
            noise_sigma: 0.5,
            seed: 7,
        }
    }

    #[test]
    fn splits_are_balanced_within_one() {
        let data = generate_in_memory(&small()).unwrap();
        for split in [Split::Train, Split::Val, Split::Test] {
            let mut counts = [0usize; 4];
            for (e, s) in data.manifest.samples.iter().zip(&data.samples) {
                if e.split == split {
                    counts[s.answer_id as usize] += 1;
                }
            }
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{split}: {counts:?}");
        }
    }

    #[test]
    fn truth_is_consistent_with_features_and_answers() {
        let spec = small();
        let data = generate_in_memory(&spec).unwrap();
        for s in &data.samples {
            let t = data.truth[&s.sample_id];
            assert!(t.event_frame < spec.frames);
            assert_eq!(answer_for(s.type_id as usize, t.class, 4), s.answer_id as usize);
            assert_eq!(&s.question_tokens[..3], template_tokens(s.type_id as usize).as_slice());
        }
    }

    #[test]
    fn zero_noise_puts_signal_only_on_the_event_frame() {
        let spec = SyntheticSpec {
            noise_sigma: 0.0,
            ..small()
        };
        let data = generate_in_memory(&spec).unwrap();
        for s in &data.samples {
            let t = data.truth[&s.sample_id].event_frame;
            for r in 0..spec.frames {
                let nonzero = s.visual.row(r).iter().any(|&x| x != 0.0);
                assert_eq!(nonzero, r == t);
            }
        }
    }

    #[test]
    fn written_dataset_loads_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic_dataset(&small(), dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        assert_eq!(ds.split_indices(Split::Test).len(), 21);
        assert_eq!(crate::feature_store::read_truth(dir.path()).unwrap().len(), 130);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for spec in [
            SyntheticSpec { n_answer_classes: 1, ..small() },
            SyntheticSpec { frames: 1, ..small() },
            SyntheticSpec { noise_sigma: -1.0, ..small() },
            SyntheticSpec { n_val: 100, n_test: 100, ..small() },
        ] {
            assert!(generate_in_memory(&spec).is_err(), "{spec:?}");
        }
    }
}
