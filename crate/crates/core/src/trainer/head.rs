use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{McdError, Result};
use crate::layers::Linear;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Linear layer and softmax over the answer vocabulary.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub linear: Linear,
}

impl PredictionHead {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, dim: usize, answers: usize) -> Self {
        Self {
            linear: Linear::new(store, rng, "head", dim, answers, true),
        }
    }

    pub fn input_width(&self) -> usize {
        self.linear.in_dim
    }

    pub fn logits(&self, g: &mut Graph, x: Var) -> Var {
        self.linear.forward(g, x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub answer_id: usize,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn prediction_from_logits(logits: &[f64]) -> Prediction {
    let probs = softmax(logits);
    let answer_id = argmax(&probs);
    Prediction { probs, answer_id }
}

/// Head applied to one combinatorial question embedding.
pub fn predict(store: &ParamStore, head: &PredictionHead, f_q: &[f64]) -> Prediction {
    let mut g = Graph::new(store);
    let x = g.constant(Tensor::row(f_q));
    let y = head.logits(&mut g, x);
    prediction_from_logits(g.value(y).data())
}

/// Mean cross-entropy of `[B, 1, A]` logits against `labels`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let [b, r, a] = g.shape(logits);
    if r != 1 || b != labels.len() {
        return Err(McdError::Shape(format!("{} labels for logits {:?}", labels.len(), g.shape(logits))));
    }
    let mut mask = Tensor::zeros([b, 1, a]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= a {
            return Err(McdError::LabelOutOfRange { label: l, classes: a });
        }
        mask.data_mut()[i * a + l] = 1.0;
    }
    let log_p = g.log_softmax(logits);
    let m = g.constant(mask);
    let picked = g.mul(log_p, m);
    let total = g.sum_all(picked);
    Ok(g.scale(total, -1.0 / b as f64))
}

/// Loss components of one batch; `total` is always recomputed from them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub answer: f64,
    pub distill_v: f64,
    pub distill_a: f64,
    pub av: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(answer: f64, distill_v: f64, distill_a: f64, av: f64, lambda_av: f64) -> Self {
        Self {
            answer,
            distill_v,
            distill_a,
            av,
            total: answer + distill_v + distill_a + lambda_av * av,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.answer, self.distill_v, self.distill_a, self.av, self.total]
            .iter()
            .all(|x| x.is_finite())
    }

    /// Component-wise mean.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let mut m = Self::default();
        for x in items {
            m.answer += x.answer / n;
            m.distill_v += x.distill_v / n;
            m.distill_a += x.distill_a / n;
            m.av += x.av / n;
            m.total += x.total / n;
        }
        m
    }
}
