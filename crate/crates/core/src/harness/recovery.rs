//! Planted-frame recovery: how often the Top-k/2 clue selection contains
//! the event frame written by the synthetic generator.

use serde::{Deserialize, Serialize};

use crate::clue_aggregator::clue_count;
use crate::error::{McdError, Result};
use crate::feature_store::{Dataset, Scenario, Split, TruthTable};
use crate::model::Mcd;
use crate::trainer::eval::eval_batches;
use crate::trainer::make_batch;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModalityRecovery {
    pub hits: usize,
    pub total: usize,
    /// `None` when no sample of the split references this modality.
    pub fraction: Option<f64>,
}

impl ModalityRecovery {
    fn record(&mut self, hit: bool) {
        self.total += 1;
        self.hits += hit as usize;
        self.fraction = Some(self.hits as f64 / self.total as f64);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub split: Split,
    pub sampled_frames: usize,
    pub selected_frames: usize,
    /// `selected / sampled`: the hit rate of a selection blind to content.
    pub chance: f64,
    pub visual: ModalityRecovery,
    pub audio: ModalityRecovery,
}

/// Selected source-frame indices of one sample next to its planted frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSelection {
    pub scenario: Option<Scenario>,
    pub event_frame: usize,
    pub visual: Vec<usize>,
    pub audio: Vec<usize>,
}

/// Samples count toward a modality only when their question type uses it;
/// types without a known scenario are skipped.
pub fn recovery_from_selections(split: Split, sampled_frames: usize, samples: &[SampleSelection]) -> RecoveryReport {
    let selected = clue_count(sampled_frames);
    let mut visual = ModalityRecovery::default();
    let mut audio = ModalityRecovery::default();
    for s in samples {
        let Some(scenario) = s.scenario else { continue };
        if scenario.uses_visual() {
            visual.record(s.visual.contains(&s.event_frame));
        }
        if scenario.uses_audio() {
            audio.record(s.audio.contains(&s.event_frame));
        }
    }
    RecoveryReport {
        split,
        sampled_frames,
        selected_frames: selected,
        chance: selected as f64 / sampled_frames.max(1) as f64,
        visual,
        audio,
    }
}

/// Eval-mode clue selections of `model` on `split`, scored against `truth`.
pub fn clue_recovery(model: &Mcd, ds: &Dataset, truth: &TruthTable, split: Split, batch_size: usize) -> Result<RecoveryReport> {
    let batches = eval_batches(ds, split, batch_size);
    if batches.is_empty() {
        return Err(McdError::EmptySplit { split: split.to_string() });
    }
    let mut samples = Vec::new();
    let mut sampled = model.config.frames;
    for idx in &batches {
        let batch = make_batch(ds, idx)?;
        sampled = sampled.min(batch.visual.rows()).min(batch.audio.rows());
        let ins = model.inspect(&batch)?;
        for ((&i, visual), audio) in idx.iter().zip(ins.visual_frames).zip(ins.audio_frames) {
            let s = &ds.samples[i];
            let t = truth.get(&s.sample_id).ok_or_else(|| McdError::MissingTruth {
                sample_id: s.sample_id.clone(),
            })?;
            samples.push(SampleSelection {
                scenario: ds.manifest.scenario_of(s.type_id as usize),
                event_frame: t.event_frame,
                visual,
                audio,
            });
        }
    }
    Ok(recovery_from_selections(split, sampled, &samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::synthetic::{generate_in_memory, SyntheticSpec};
    use crate::model::{ModelConfig, ModelShape};

    #[test]
    fn injected_oracle_selection_recovers_everything() {
        let samples: Vec<_> = (0..12)
            .map(|t| SampleSelection {
                scenario: Some(Scenario::AudioVisual),
                event_frame: t,
                visual: vec![t],
                audio: vec![t, (t + 1) % 12],
            })
            .collect();
        let r = recovery_from_selections(Split::Test, 12, &samples);
        assert_eq!(r.visual.fraction, Some(1.0));
        assert_eq!(r.audio.fraction, Some(1.0));
        assert_eq!(r.chance, 0.5);
    }

    #[test]
    fn modalities_follow_the_question_scenario() {
        let s = |scenario, hit: bool| SampleSelection {
            scenario,
            event_frame: 3,
            visual: vec![if hit { 3 } else { 0 }],
            audio: vec![if hit { 3 } else { 0 }],
        };
        let samples = [s(Some(Scenario::Audio), true), s(Some(Scenario::Visual), false), s(None, true)];
        let r = recovery_from_selections(Split::Test, 4, &samples);
        assert_eq!((r.audio.hits, r.audio.total), (1, 1));
        assert_eq!((r.visual.hits, r.visual.total), (0, 1));
    }

    fn spec(noise_sigma: f64, n_test: usize) -> SyntheticSpec {
        SyntheticSpec {
            n_samples: n_test + 2,
            n_val: 1,
            n_test,
            frames: 12,
            dim: 16,
            n_answer_classes: 4,
            n_keywords: 2,
            noise_sigma,
            seed: 21,
        }
    }

    #[test]
    fn content_blind_selection_sits_at_the_chance_rate() {
        // noise swamps the unit-variance prototype, so the planted frame is
        // statistically indistinguishable from the rest
        let d = generate_in_memory(&spec(50.0, 600)).unwrap();
        let ds = Dataset::from_parts(d.manifest, d.samples).unwrap();
        let model = Mcd::new(ModelConfig::default(), ModelShape::of(&ds.manifest), 3).unwrap();
        let r = clue_recovery(&model, &ds, &d.truth, Split::Test, 64).unwrap();
        assert_eq!(r.chance, 0.5);
        for m in [&r.visual, &r.audio] {
            let f = m.fraction.unwrap();
            let sigma = (0.25 / m.total as f64).sqrt();
            assert!((f - 0.5).abs() <= 3.0 * sigma, "{f} over {}", m.total);
        }
    }

    #[test]
    fn missing_truth_is_an_error() {
        let d = generate_in_memory(&spec(0.5, 4)).unwrap();
        let ds = Dataset::from_parts(d.manifest, d.samples).unwrap();
        let model = Mcd::new(ModelConfig::default(), ModelShape::of(&ds.manifest), 3).unwrap();
        let err = clue_recovery(&model, &ds, &TruthTable::new(), Split::Test, 8).unwrap_err();
        assert!(matches!(err, McdError::MissingTruth { .. }));
    }
}
