//! Central finite differences of the full training objective against the
//! tape gradients on a small seeded instance.
//!
//! The forward pass runs in training mode with a fixed stream, so dropout
//! masks and sampled frames are identical for every perturbed evaluation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::feature_store::synthetic::{generate_in_memory, SyntheticSpec};
use crate::layers::{Forward, Mode};
use crate::model::{AblationMode, Batch, Mcd, ModelConfig, ModelShape};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::semantic_approx::ContrastConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub dim: usize,
    pub frames: usize,
    pub batch: usize,
    pub blocks: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator. Round-off in the
    /// numeric derivative is about `eps * |loss| / step`, roughly 1e-10, so
    /// entries with gradients below this floor are judged by absolute error
    /// `tolerance * floor` instead.
    pub denominator_floor: f64,
    pub ablation: AblationMode,
    /// Test hook: perturb the analytic gradient of this tensor.
    pub corrupt: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 11,
            dim: 8,
            frames: 4,
            batch: 3,
            blocks: 1,
            step: 1e-5,
            tolerance: 1e-4,
            denominator_floor: 1e-5,
            ablation: AblationMode::default(),
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked_entries: usize,
    pub tensors: Vec<TensorCheck>,
    pub failing: Vec<String>,
    pub elapsed_secs: f64,
    pub passed: bool,
}

pub fn micro_instance(cfg: &GradcheckConfig) -> Result<(Mcd, Batch)> {
    let spec = SyntheticSpec {
        // whole splits of the four classes keep the generator balanced
        n_samples: 3 * 4 * cfg.batch.div_ceil(4),
        n_val: 4 * cfg.batch.div_ceil(4),
        n_test: 4 * cfg.batch.div_ceil(4),
        frames: cfg.frames,
        dim: cfg.dim,
        n_answer_classes: 4,
        n_keywords: 2,
        noise_sigma: 0.5,
        seed: cfg.seed,
    };
    let data = generate_in_memory(&spec)?;
    let model_cfg = ModelConfig {
        blocks: cfg.blocks,
        frames: cfg.frames,
        ablation: cfg.ablation.clone(),
        ..ModelConfig::default()
    };
    let model = Mcd::new(model_cfg, ModelShape::of(&data.manifest), cfg.seed)?;
    let batch = Batch::from_bundles(&data.samples.iter().take(cfg.batch).collect::<Vec<_>>())?;
    Ok((model, batch))
}

pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let started = Instant::now();
    let (model, batch) = micro_instance(cfg)?;
    let contrast = ContrastConfig::default();
    let pass_rng = Rng::stream(cfg.seed, 99);
    let loss_at = |store: &ParamStore| -> Result<f64> {
        let mut fw = Forward::with_rng(store, Mode::Train, pass_rng.clone());
        let out = model.forward(&mut fw, &batch)?;
        Ok(model.loss(&mut fw, &out, &batch.labels, &contrast)?.breakdown.total)
    };
    let analytic = {
        let mut fw = Forward::with_rng(&model.store, Mode::Train, pass_rng.clone());
        let out = model.forward(&mut fw, &batch)?;
        let loss = model.loss(&mut fw, &out, &batch.labels, &contrast)?;
        fw.g.backward(loss.total).into_params()
    };

    let mut store = model.store.clone();
    let ids: Vec<_> = store.trainable_ids().collect();
    let mut tensors = Vec::with_capacity(ids.len());
    let mut checked = 0;
    for id in ids {
        let name = store.name(id).to_string();
        let n = store.get(id).len();
        let mut grad = analytic
            .get(&id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        if cfg.corrupt.as_deref() == Some(name.as_str()) {
            grad.iter_mut().for_each(|g| *g = *g * 1.5 + 1e-3);
        }
        let mut check = TensorCheck {
            name,
            entries: n,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for i in 0..n {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + cfg.step;
            let up = loss_at(&store)?;
            store.get_mut(id).data_mut()[i] = orig - cfg.step;
            let down = loss_at(&store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let abs = (grad[i] - numeric).abs();
            let rel = abs / grad[i].abs().max(numeric.abs()).max(cfg.denominator_floor);
            check.max_abs_err = check.max_abs_err.max(abs);
            check.max_rel_err = check.max_rel_err.max(rel);
        }
        checked += n;
        tensors.push(check);
    }
    let failing: Vec<String> = tensors
        .iter()
        .filter(|t| !(t.max_rel_err <= cfg.tolerance))
        .map(|t| t.name.clone())
        .collect();
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        max_rel_err,
        tolerance: cfg.tolerance,
        checked_entries: checked,
        passed: failing.is_empty(),
        tensors,
        failing,
        elapsed_secs: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tape_gradients_match_finite_differences() {
        let r = gradcheck(&GradcheckConfig::default()).unwrap();
        assert!(r.passed, "max rel err {:.3e}, failing {:?}", r.max_rel_err, r.failing);
        assert!(r.checked_entries > 1000);
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let cfg = GradcheckConfig {
            corrupt: Some("head.weight".into()),
            ..GradcheckConfig::default()
        };
        let r = gradcheck(&cfg).unwrap();
        assert!(!r.passed);
        assert!(r.failing.contains(&"head.weight".to_string()), "{:?}", r.failing);
    }
}
