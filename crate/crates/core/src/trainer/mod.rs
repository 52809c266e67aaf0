//! Optimisation, checkpoints, evaluation and the gradient oracle.

pub mod checkpoint;
pub mod eval;
pub mod gradcheck;
pub mod head;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{McdError, Result};
use crate::feature_store::{Dataset, Split};
use crate::json::write_json_pretty;
use crate::layers::{apply_bn_updates, Forward, Mode};
use crate::model::{Batch, Mcd, ModelConfig, ModelShape};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::semantic_approx::ContrastConfig;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointIndex};
pub use eval::{evaluate, EvalReport};
pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
pub use head::{LossBreakdown, Prediction, PredictionHead};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay_every: usize,
    pub lr_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_av: f64,
    pub tau: f64,
    pub seed: u64,
    pub weight_decay: f64,
    /// Global L2 norm clip, off when absent.
    pub grad_clip: Option<f64>,
    /// Group training batches by sequence shape instead of rejecting
    /// mixed-length batches.
    pub bucket_by_length: bool,
    /// Evaluate the test split after every epoch for the accuracy curves.
    pub track_test: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_decay_every: 8,
            lr_factor: 0.1,
            epochs: 30,
            batch_size: 64,
            lambda_av: 0.1,
            tau: 0.1,
            seed: 7,
            weight_decay: 0.0,
            grad_clip: None,
            bucket_by_length: false,
            track_test: true,
        }
    }
}

impl TrainConfig {
    pub fn contrast(&self) -> ContrastConfig {
        ContrastConfig {
            tau: self.tau,
            lambda_av: self.lambda_av,
        }
    }

    /// `lr · factor^⌊epoch / decay_every⌋`
    /// `lr · factor^⌊epoch / decay_every⌋`, computed as a division by the
    /// integral power of `1/factor` so that `1e-3` and `0.1` give exactly
    /// `1e-4`, `1e-5`, ... rather than accumulating rounding.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr / self.lr_factor.recip().powi((epoch / self.lr_decay_every) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(McdError::Config(m.into()));
        if !(self.lr > 0.0) || !(self.lr_factor > 0.0) {
            return err("lr and lr_factor must be positive");
        }
        if self.lr_decay_every == 0 || self.epochs == 0 || self.batch_size == 0 {
            return err("lr_decay_every, epochs and batch_size must be positive");
        }
        if self.weight_decay < 0.0 || self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return err("weight_decay must be non-negative and grad_clip positive");
        }
        self.contrast().validate()
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| McdError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| McdError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| McdError::Config(format!("{}: {e}", path.display())))
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (&id, g) in grads {
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = store.get_mut(id);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub batch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub mode: String,
    pub config_fingerprint: String,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl LossTrace {
    /// Epoch with the highest validation accuracy (earliest on ties).
    pub fn best_val_epoch(&self) -> Option<&EpochRecord> {
        self.epochs
            .iter()
            .filter(|e| e.val_accuracy.is_some())
            .fold(None, |best: Option<&EpochRecord>, e| match best {
                Some(b) if b.val_accuracy >= e.val_accuracy => Some(b),
                _ => Some(e),
            })
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::json::read_json(path)
    }
}

pub struct FitOutcome {
    pub last: Mcd,
    pub best: Mcd,
    pub best_epoch: usize,
    pub trace: LossTrace,
}

pub const BEST_CHECKPOINT: &str = "best.mcdc";
pub const LAST_CHECKPOINT: &str = "last.mcdc";
pub const TRACE_FILE: &str = "trace.json";

/// Training batches for one epoch, reshuffled per epoch from the run seed.
fn epoch_batches(ds: &Dataset, indices: &[usize], cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    Rng::stream(cfg.seed, 1 + epoch as u64).shuffle(&mut order);
    if !cfg.bucket_by_length {
        return order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
    }
    let mut buckets: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for i in order {
        let s = &ds.samples[i];
        buckets.entry((s.visual.rows, s.audio.rows)).or_default().push(i);
    }
    let mut batches: Vec<Vec<usize>> = buckets
        .values()
        .flat_map(|b| b.chunks(cfg.batch_size).map(<[usize]>::to_vec))
        .collect();
    Rng::stream(cfg.seed, 1 << 40 | epoch as u64).shuffle(&mut batches);
    batches
}

pub fn make_batch(ds: &Dataset, indices: &[usize]) -> Result<Batch> {
    Batch::from_bundles(&indices.iter().map(|&i| &ds.samples[i]).collect::<Vec<_>>())
}

/// Squared global norm scaling and weight decay applied in place.
fn postprocess(grads: &mut BTreeMap<ParamId, Tensor>, store: &ParamStore, cfg: &TrainConfig) {
    if cfg.weight_decay > 0.0 {
        for (&id, g) in grads.iter_mut() {
            for (gi, w) in g.data_mut().iter_mut().zip(store.get(id).data()) {
                *gi += cfg.weight_decay * w;
            }
        }
    }
    if let Some(clip) = cfg.grad_clip {
        let norm = grads.values().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
        if norm > clip {
            grads.values_mut().for_each(|g| g.scale_in_place(clip / norm));
        }
    }
}

/// One optimisation step on `batch`; returns the pre-update losses.
pub fn train_step(
    model: &mut Mcd,
    adam: &mut Adam,
    batch: &Batch,
    cfg: &TrainConfig,
    lr: f64,
    rng: Rng,
) -> Result<LossBreakdown> {
    let contrast = cfg.contrast();
    let (breakdown, mut grads, updates) = {
        let mut fw = Forward::with_rng(&model.store, Mode::Train, rng);
        let out = model.forward(&mut fw, batch)?;
        let loss = model.loss(&mut fw, &out, &batch.labels, &contrast)?;
        if !loss.breakdown.is_finite() {
            return Err(McdError::NonFiniteLoss {
                epoch: 0,
                batch: 0,
                detail: format!("{:?}", loss.breakdown),
            });
        }
        let grads: BTreeMap<ParamId, Tensor> = fw.g.backward(loss.total).into_params().into_iter().collect();
        (loss.breakdown, grads, fw.bn_updates)
    };
    postprocess(&mut grads, &model.store, cfg);
    adam.step(&mut model.store, &grads, lr);
    apply_bn_updates(&mut model.store, &updates);
    Ok(breakdown)
}

fn step_rng(seed: u64, step: u64) -> Rng {
    Rng::stream(seed, 1 << 48 | step)
}

/// Trains a fresh model; writes checkpoints and the trace under `out_dir`
/// when given.
pub fn fit(ds: &Dataset, cfg: &RunConfig, out_dir: Option<&Path>) -> Result<FitOutcome> {
    cfg.validate()?;
    let train_idx = ds.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(McdError::EmptySplit { split: "train".into() });
    }
    let val_idx = ds.split_indices(Split::Val);
    let has_test = !ds.split_indices(Split::Test).is_empty();
    let tc = &cfg.train;
    let mut model = Mcd::new(cfg.model.clone(), ModelShape::of(&ds.manifest), tc.seed)?;
    let mut adam = Adam::default();
    let mut trace = LossTrace {
        mode: cfg.model.ablation.label(),
        config_fingerprint: cfg.fingerprint(),
        steps: Vec::new(),
        epochs: Vec::new(),
    };
    let mut best: Option<(f64, usize, Mcd)> = None;
    let mut global_step = 0u64;
    for epoch in 0..tc.epochs {
        let lr = tc.lr_at(epoch);
        let mut losses = Vec::new();
        for (bi, idx) in epoch_batches(ds, &train_idx, tc, epoch).iter().enumerate() {
            let batch = make_batch(ds, idx)?;
            let loss = train_step(&mut model, &mut adam, &batch, tc, lr, step_rng(tc.seed, global_step))
                .map_err(|e| match e {
                    McdError::NonFiniteLoss { detail, .. } => McdError::NonFiniteLoss {
                        epoch,
                        batch: bi,
                        detail,
                    },
                    other => other,
                })?;
            global_step += 1;
            trace.steps.push(StepRecord {
                epoch,
                batch: bi,
                lr,
                loss,
            });
            losses.push(loss);
        }
        let val_accuracy = if val_idx.is_empty() {
            None
        } else {
            Some(evaluate(&model, ds, Split::Val, cfg)?.overall)
        };
        let test_accuracy = if has_test && tc.track_test {
            Some(evaluate(&model, ds, Split::Test, cfg)?.overall)
        } else {
            None
        };
        let mean = LossBreakdown::mean(&losses);
        log::info!(
            "epoch {epoch}: lr {lr:.0e} loss {:.4} (answer {:.4}) val {:?} test {:?}",
            mean.total,
            mean.answer,
            val_accuracy,
            test_accuracy
        );
        trace.epochs.push(EpochRecord {
            epoch,
            lr,
            loss: mean,
            val_accuracy,
            test_accuracy,
        });
        let score = val_accuracy.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    if let Some(dir) = out_dir {
        save_checkpoint(&best, cfg, Some(best_epoch), &dir.join(BEST_CHECKPOINT))?;
        save_checkpoint(&model, cfg, Some(tc.epochs - 1), &dir.join(LAST_CHECKPOINT))?;
        write_json_pretty(&dir.join(TRACE_FILE), &trace)?;
    }
    Ok(FitOutcome {
        last: model,
        best,
        best_epoch,
        trace,
    })
}
