use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::error::{McdError, Result};
use crate::feature_store::{Dataset, Scenario, Split};
use crate::model::Mcd;

use super::{make_batch, Prediction, RunConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeAccuracy {
    pub name: String,
    pub scenario: Option<Scenario>,
    pub correct: usize,
    pub total: usize,
    /// `None` when the split has no sample of this type.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub mode: String,
    pub config_fingerprint: String,
    /// One entry per manifest question type, in manifest order.
    pub per_type: Vec<TypeAccuracy>,
    /// Mean of member-type accuracies, keyed `A-avg`, `V-avg`, `AV-avg`.
    pub scenario_averages: BTreeMap<String, f64>,
    pub overall: f64,
    pub correct: usize,
    pub total: usize,
}

/// Split indices grouped into shape-homogeneous batches, in index order.
pub fn eval_batches(ds: &Dataset, split: Split, batch_size: usize) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for i in ds.split_indices(split) {
        let s = &ds.samples[i];
        groups.entry((s.visual.rows, s.audio.rows)).or_default().push(i);
    }
    groups
        .values()
        .flat_map(|g| g.chunks(batch_size.max(1)).map(<[usize]>::to_vec))
        .collect()
}

/// Eval-mode predictions for every sample of `split`, as `(index, prediction)`.
pub fn predict_split(model: &Mcd, ds: &Dataset, split: Split, batch_size: usize) -> Result<Vec<(usize, Prediction)>> {
    let batches = eval_batches(ds, split, batch_size);
    let run = |idx: &Vec<usize>| -> Result<Vec<(usize, Prediction)>> {
        let preds = model.predict_batch(&make_batch(ds, idx)?)?;
        Ok(idx.iter().copied().zip(preds).collect())
    };
    let chunks: Vec<Vec<(usize, Prediction)>> = match Backend::from_env()? {
        Backend::Reference => batches.iter().map(run).collect::<Result<_>>()?,
        Backend::Parallel => batches.par_iter().map(run).collect::<Result<_>>()?,
    };
    let mut all: Vec<_> = chunks.into_iter().flatten().collect();
    all.sort_by_key(|(i, _)| *i);
    Ok(all)
}

pub fn report_from_predictions(
    ds: &Dataset,
    split: Split,
    predictions: &[(usize, Prediction)],
    mode: String,
    config_fingerprint: String,
) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(McdError::EmptySplit { split: split.to_string() });
    }
    let m = &ds.manifest;
    let mut per_type: Vec<TypeAccuracy> = m
        .question_type_names
        .iter()
        .enumerate()
        .map(|(t, name)| TypeAccuracy {
            name: name.clone(),
            scenario: m.scenario_of(t),
            correct: 0,
            total: 0,
            accuracy: None,
        })
        .collect();
    let mut correct = 0;
    for (i, p) in predictions {
        let s = &ds.samples[*i];
        let hit = p.answer_id == s.answer_id as usize;
        let entry = &mut per_type[s.type_id as usize];
        entry.total += 1;
        entry.correct += hit as usize;
        correct += hit as usize;
    }
    for t in per_type.iter_mut() {
        t.accuracy = (t.total > 0).then(|| t.correct as f64 / t.total as f64);
    }
    let mut members: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for t in &per_type {
        if let (Some(s), Some(a)) = (t.scenario, t.accuracy) {
            members.entry(s.label().to_string()).or_default().push(a);
        }
    }
    let scenario_averages = members
        .into_iter()
        .map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    Ok(EvalReport {
        split,
        mode,
        config_fingerprint,
        per_type,
        scenario_averages,
        overall: correct as f64 / predictions.len() as f64,
        correct,
        total: predictions.len(),
    })
}

/// Deterministic eval-mode pass over one split.
pub fn evaluate(model: &Mcd, ds: &Dataset, split: Split, run: &RunConfig) -> Result<EvalReport> {
    let preds = predict_split(model, ds, split, run.train.batch_size)?;
    report_from_predictions(ds, split, &preds, model.config.ablation.label(), run.fingerprint())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::synthetic::{generate_in_memory, SyntheticSpec};
    use crate::model::ModelShape;

    fn dataset(n_test: usize) -> Dataset {
        let spec = SyntheticSpec {
            n_samples: n_test + 4,
            n_val: 2,
            n_test,
            frames: 4,
            dim: 8,
            n_answer_classes: 4,
            n_keywords: 2,
            noise_sigma: 0.5,
            seed: 8,
        };
        let d = generate_in_memory(&spec).unwrap();
        Dataset::from_parts(d.manifest, d.samples).unwrap()
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let ds = dataset(30);
        let preds: Vec<_> = ds
            .split_indices(Split::Test)
            .into_iter()
            .map(|i| {
                let a = ds.samples[i].answer_id as usize;
                (i, Prediction { probs: vec![], answer_id: a })
            })
            .collect();
        let r = report_from_predictions(&ds, Split::Test, &preds, "default".into(), "x".into()).unwrap();
        assert_eq!(r.overall, 1.0);
        assert!(r.per_type.iter().all(|t| t.accuracy == Some(1.0)));
        assert!(r.scenario_averages.values().all(|&a| a == 1.0));
        let names: Vec<_> = r.per_type.iter().map(|t| t.name.clone()).collect();
        assert_eq!(names, ds.manifest.question_type_names);
        assert_eq!(r.scenario_averages.len(), 3);
    }

    #[test]
    fn empty_split_is_an_error() {
        let ds = dataset(0);
        let model = Mcd::new(Default::default(), ModelShape::of(&ds.manifest), 0).unwrap();
        let err = evaluate(&model, &ds, Split::Test, &RunConfig::default()).unwrap_err();
        assert!(matches!(err, McdError::EmptySplit { .. }));
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let ds = dataset(400);
        let mut run = RunConfig::default();
        run.model.frames = 4;
        let model = Mcd::new(run.model.clone(), ModelShape::of(&ds.manifest), 1).unwrap();
        let r = evaluate(&model, &ds, Split::Test, &run).unwrap();
        let p = 0.25;
        let sigma = (p * (1.0 - p) / 400.0f64).sqrt();
        // balanced answers: any answer-blind predictor scores 1/A in expectation
        assert!((r.overall - p).abs() <= 3.0 * sigma, "{}", r.overall);
        assert_eq!(r.total, 400);
    }
}
