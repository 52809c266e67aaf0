//! Small trainable building blocks on top of [`Graph`].

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::params::{normal, uniform_fan_in, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Running-statistic update recorded by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance.
    pub batch_var: Vec<f64>,
    pub momentum: f64,
}

/// One forward pass: the tape plus mode, a dropout/sampling stream and the
/// batch-norm updates to apply once the step is done.
pub struct Forward<'s> {
    pub g: Graph<'s>,
    pub mode: Mode,
    rng: Rng,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'s> Forward<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode, seed: u64) -> Self {
        Self {
            g: Graph::new(store),
            mode,
            rng: Rng::new(seed),
            bn_updates: Vec::new(),
        }
    }

    pub fn with_rng(store: &'s ParamStore, mode: Mode, rng: Rng) -> Self {
        Self {
            g: Graph::new(store),
            mode,
            rng,
            bn_updates: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn rng(&mut self) -> &mut Rng {
        &mut self.rng
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.training() || rate <= 0.0 {
            return x;
        }
        let shape = self.g.shape(x);
        let keep = 1.0 - rate;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| if self.rng.uniform() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = self.g.constant(Tensor::from_vec(shape, data));
        self.g.mul(x, mask)
    }
}

pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        for (id, batch) in [(u.mean, &u.batch_mean), (u.var, &u.batch_var)] {
            let running = store.get_mut(id);
            for (r, b) in running.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - u.momentum) * *r + u.momentum * b;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform fan-in weights and a zero bias.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_fan_in(rng, [1, in_dim, out_dim], in_dim),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([1, 1, out_dim]), true));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64, momentum: f64) -> Self {
        assert!(eps > 0.0, "batch-norm eps must be positive");
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([1, 1, dim], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([1, 1, dim]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros([1, 1, dim]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full([1, 1, dim], 1.0), false),
            eps,
            momentum,
        }
    }

    /// Per-channel normalisation over batch × time of a `[B, L, D]` input.
    pub fn forward(&self, fw: &mut Forward, x: Var) -> Var {
        let [b, l, d] = fw.g.shape(x);
        let g = &mut fw.g;
        let normalized = if fw.mode == Mode::Train {
            let flat = g.reshape(x, [1, b * l, d]);
            let mean = g.mean_rows(flat);
            let centered = g.sub(flat, mean);
            let sq = g.mul(centered, centered);
            let var = g.mean_rows(sq);
            let shifted = g.add_scalar(var, self.eps);
            let inv_std = g.pow(shifted, -0.5);
            let n = (b * l) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            fw.bn_updates.push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                batch_mean: g.value(mean).data().to_vec(),
                batch_var: g.value(var).data().iter().map(|v| v * unbiased).collect(),
                momentum: self.momentum,
            });
            let y = g.mul(centered, inv_std);
            g.reshape(y, [b, l, d])
        } else {
            let mean = g.param(self.running_mean);
            let var = g.store().get(self.running_var).clone();
            let inv_std = g.constant(var.map(|v| 1.0 / (v + self.eps).sqrt()));
            let centered = g.sub(x, mean);
            g.mul(centered, inv_std)
        };
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let scaled = g.mul(normalized, gamma);
        g.add(scaled, beta)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, vocab: usize, dim: usize) -> Self {
        Self {
            table: store.add(format!("{name}.table"), normal(rng, [1, vocab, dim], 1.0), true),
            vocab,
            dim,
        }
    }

    /// `ids` is row-major `[b, r]`.
    pub fn forward(&self, g: &mut Graph, ids: Vec<usize>, b: usize, r: usize) -> Var {
        let t = g.param(self.table);
        g.embed(t, ids, b, r)
    }
}

/// Single-layer LSTM with gate order (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct Lstm {
    pub input: ParamId,
    pub hidden: ParamId,
    pub bias: ParamId,
    pub hidden_dim: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, in_dim: usize, hidden_dim: usize) -> Self {
        let h = hidden_dim;
        let mut bias = Tensor::zeros([1, 1, 4 * h]);
        // forget gate starts open
        bias.data_mut()[h..2 * h].iter_mut().for_each(|x| *x = 1.0);
        Self {
            input: store.add(format!("{name}.w_input"), uniform_fan_in(rng, [1, in_dim, 4 * h], h), true),
            hidden: store.add(format!("{name}.w_hidden"), uniform_fan_in(rng, [1, h, 4 * h], h), true),
            bias: store.add(format!("{name}.bias"), bias, true),
            hidden_dim,
        }
    }

    /// Runs over `x: [B, T, D]`; `lengths[b]` valid steps per row, later
    /// steps carry the state forward unchanged. Returns (`[B, T, H]` states,
    /// `[B, 1, H]` final state).
    pub fn forward(&self, g: &mut Graph, x: Var, lengths: &[usize]) -> (Var, Var) {
        let [b, t, _] = g.shape(x);
        let h_dim = self.hidden_dim;
        let w_in = g.param(self.input);
        let w_h = g.param(self.hidden);
        let bias = g.param(self.bias);
        let projected = g.matmul(x, w_in);
        let projected = g.add(projected, bias);
        let mut h = g.constant(Tensor::zeros([b, 1, h_dim]));
        let mut c = g.constant(Tensor::zeros([b, 1, h_dim]));
        let mut states = Vec::with_capacity(t);
        for step in 0..t {
            let x_t = g.gather_rows(projected, vec![vec![step]; b]);
            let rec = g.matmul(h, w_h);
            let gates = g.add(x_t, rec);
            let i_raw = g.slice_cols(gates, 0, h_dim);
            let f_raw = g.slice_cols(gates, h_dim, h_dim);
            let c_raw = g.slice_cols(gates, 2 * h_dim, h_dim);
            let o_raw = g.slice_cols(gates, 3 * h_dim, h_dim);
            let i = g.sigmoid(i_raw);
            let f = g.sigmoid(f_raw);
            let cand = g.tanh(c_raw);
            let o = g.sigmoid(o_raw);
            let fc = g.mul(f, c);
            let ic = g.mul(i, cand);
            let c_new = g.add(fc, ic);
            let c_act = g.tanh(c_new);
            let h_new = g.mul(o, c_act);
            if lengths.iter().all(|&len| step < len) {
                h = h_new;
                c = c_new;
            } else {
                let mask = Tensor::from_vec(
                    [b, 1, 1],
                    lengths.iter().map(|&len| if step < len { 1.0 } else { 0.0 }).collect(),
                );
                let m = g.constant(mask);
                let dh = g.sub(h_new, h);
                let dh = g.mul(dh, m);
                h = g.add(h, dh);
                let dc = g.sub(c_new, c);
                let dc = g.mul(dc, m);
                c = g.add(c, dc);
            }
            states.push(h);
        }
        let stacked = g.concat(&states);
        let states = g.reshape(stacked, [b, t, h_dim]);
        (states, h)
    }
}

/// Two-layer ReLU MLP `D → hidden → D`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), dim, hidden, true),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, dim, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.relu(h);
        self.down.forward(g, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_norm_training_normalizes_channels() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2, 1e-5, 0.1);
        let mut fw = Forward::new(&store, Mode::Train, 0);
        let x = fw.g.constant(Tensor::from_vec([2, 2, 2], vec![1.0, 10.0, 3.0, 20.0, 5.0, 30.0, 7.0, 40.0]));
        let y = bn.forward(&mut fw, x);
        let v = fw.g.value(y);
        for ch in 0..2 {
            let col: Vec<f64> = (0..4).map(|i| v.data()[i * 2 + ch]).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert_eq!(fw.bn_updates.len(), 1);
        assert_eq!(fw.bn_updates[0].batch_mean, vec![4.0, 25.0]);
    }

    #[test]
    fn batch_norm_eval_uses_initial_stats() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2, 1e-5, 0.1);
        let mut fw = Forward::new(&store, Mode::Eval, 0);
        let x = fw.g.constant(Tensor::row(&[2.0, -4.0]));
        let y = bn.forward(&mut fw, x);
        let expected = [2.0 / (1.0f64 + 1e-5).sqrt(), -4.0 / (1.0f64 + 1e-5).sqrt()];
        for (a, b) in fw.g.value(y).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(fw.bn_updates.is_empty());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1, 1e-5, 0.1);
        let update = BnUpdate {
            mean: bn.running_mean,
            var: bn.running_var,
            batch_mean: vec![2.0],
            batch_var: vec![3.0],
            momentum: 0.1,
        };
        apply_bn_updates(&mut store, &[update]);
        assert!((store.get(bn.running_mean).data()[0] - 0.2).abs() < 1e-12);
        assert!((store.get(bn.running_var).data()[0] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let store = ParamStore::new();
        let mut fw = Forward::new(&store, Mode::Eval, 0);
        let x = fw.g.constant(Tensor::row(&[1.0, 2.0]));
        assert_eq!(fw.dropout(x, 0.5), x);
    }

    #[test]
    fn lstm_masking_freezes_finished_rows() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let lstm = Lstm::new(&mut store, &mut rng, "lstm", 3, 4);
        let mut g = Graph::new(&store);
        let x = g.constant(crate::params::normal(&mut rng, [2, 3, 3], 1.0));
        let (states, last) = lstm.forward(&mut g, x, &[1, 3]);
        let s = g.value(states);
        let l = g.value(last);
        // row 0 stopped after one step
        assert_eq!(s.row_slice(0, 0), s.row_slice(0, 2));
        assert_eq!(l.row_slice(0, 0), s.row_slice(0, 0));
        assert_eq!(l.row_slice(1, 0), s.row_slice(1, 2));
        assert_ne!(s.row_slice(1, 0), s.row_slice(1, 2));
    }
}
