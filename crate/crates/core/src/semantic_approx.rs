//! Contrastive alignment in a shared latent space.
//!
//! Each loss is InfoNCE over the mini-batch: anchor `i` is scored against
//! every candidate `k`, the diagonal is the positive pair and the rest of
//! row `i` are its negatives. Per-anchor losses are averaged.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{McdError, Result};
use crate::layers::Linear;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Denominator guard for cosine similarity.
pub const COS_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    pub tau: f64,
    pub lambda_av: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda_av: 0.1,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(McdError::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(self.lambda_av >= 0.0 && self.lambda_av.is_finite()) {
            return Err(McdError::Config(format!("lambda_av must be non-negative, got {}", self.lambda_av)));
        }
        Ok(())
    }
}

/// `Θ`: `D → D_lat → D_lat` with a ReLU between, shared by every input.
#[derive(Clone, Debug)]
pub struct LatentProjector {
    pub first: Linear,
    pub second: Linear,
}

impl LatentProjector {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, dim: usize, latent: usize) -> Self {
        Self {
            first: Linear::new(store, rng, "latent.first", dim, latent, true),
            second: Linear::new(store, rng, "latent.second", latent, latent, true),
        }
    }

    pub fn project(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.first.forward(g, x);
        let h = g.relu(h);
        self.second.forward(g, h)
    }
}

/// Rows scaled to unit length, `x / sqrt(‖x‖² + ε²)`.
fn normalize(g: &mut Graph, x: Var) -> Var {
    let sq = g.mul(x, x);
    let norm_sq = g.sum_cols(sq);
    let guarded = g.add_scalar(norm_sq, COS_EPS * COS_EPS);
    let inv = g.pow(guarded, -0.5);
    g.mul(x, inv)
}

/// Mean InfoNCE of `anchors[i]` against `candidates[·]`, both `[B, 1, D]`.
pub fn info_nce(g: &mut Graph, anchors: Var, candidates: Var, tau: f64) -> Result<Var> {
    let [b, r, d] = g.shape(anchors);
    if b == 0 {
        return Err(McdError::Shape("contrastive loss over an empty batch".into()));
    }
    if r != 1 || g.shape(candidates) != [b, 1, d] {
        return Err(McdError::Shape(format!(
            "contrastive inputs {:?} vs {:?}",
            g.shape(anchors),
            g.shape(candidates)
        )));
    }
    let a = g.reshape(anchors, [1, b, d]);
    let c = g.reshape(candidates, [1, b, d]);
    let a = normalize(g, a);
    let c = normalize(g, c);
    let sims = g.bmm(a, c, true);
    Ok(info_nce_from_cosines(g, sims, tau))
}

/// Mean of `-log softmax(row_i / τ)[i]` over a `[1, B, B]` cosine matrix.
pub fn info_nce_from_cosines(g: &mut Graph, sims: Var, tau: f64) -> Var {
    let b = g.shape(sims)[1];
    let logits = g.scale(sims, 1.0 / tau);
    let log_p = g.log_softmax(logits);
    let eye = g.constant(Tensor::identity(b));
    let diag = g.mul(log_p, eye);
    let total = g.sum_all(diag);
    g.scale(total, -1.0 / b as f64)
}

/// `ℒ_c^{q̂j}` between the question embedding and one modality summary.
pub fn distill_loss(
    g: &mut Graph,
    theta: &LatentProjector,
    question: Var,
    summary: Var,
    cfg: &ContrastConfig,
) -> Result<Var> {
    let zq = theta.project(g, question);
    let zj = theta.project(g, summary);
    info_nce(g, zq, zj, cfg.tau)
}

/// `m_j = Σ_blocks mean_time(cross_j)`; `None` without cross features.
pub fn cross_summary(g: &mut Graph, cross: &[Var]) -> Option<Var> {
    let mut acc: Option<Var> = None;
    for &c in cross {
        let m = g.mean_rows(c);
        acc = Some(match acc {
            Some(a) => g.add(a, m),
            None => m,
        });
    }
    acc
}

/// `ℒ_c^{av}` on normalised cross summaries.
pub fn av_contrast_loss(g: &mut Graph, m_v: Var, m_a: Var, cfg: &ContrastConfig) -> Result<Var> {
    info_nce(g, m_v, m_a, cfg.tau)
}
