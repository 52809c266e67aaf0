//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter the
//! graph by id and their gradients are collected by [`Graph::backward`].
//! Binary element-wise ops broadcast any axis of size one.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Pow(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    /// `[B, m, k] · [1, k, n]`
    MatMul(Var, Var),
    /// `[B, m, k] · [B', k, n]` or, with `trans_b`, `· [B', n, k]ᵀ`; `B'` is
    /// `B` or 1.
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    SumRows(Var),
    SumCols(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    GatherRows(Var, Vec<Vec<usize>>),
    Embed(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    leaves: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn leaf(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var)
    }

    pub fn params(&self) -> &HashMap<ParamId, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor> {
        self.params
    }
}

fn broadcast_shape(a: [usize; 3], b: [usize; 3]) -> [usize; 3] {
    let mut out = [0; 3];
    for d in 0..3 {
        out[d] = match (a[d], b[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("cannot broadcast {a:?} with {b:?}"),
        };
    }
    out
}

fn strides(shape: [usize; 3], out: [usize; 3]) -> [usize; 3] {
    let full = [shape[1] * shape[2], shape[2], 1];
    let mut s = [0; 3];
    for d in 0..3 {
        s[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { full[d] };
    }
    s
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(a.shape(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape());
    let sa = strides(a.shape(), out);
    let sb = strides(b.shape(), out);
    let (ad, bd) = (a.data(), b.data());
    let mut data = Vec::with_capacity(out.iter().product());
    for i in 0..out[0] {
        for j in 0..out[1] {
            let ra = i * sa[0] + j * sa[1];
            let rb = i * sb[0] + j * sb[1];
            for k in 0..out[2] {
                data.push(f(ad[ra + k * sa[2]], bd[rb + k * sb[2]]));
            }
        }
    }
    Tensor::from_vec(out, data)
}

/// Sum `grad` (shaped like the broadcast output) down to `shape`.
fn reduce_to(grad: &Tensor, shape: [usize; 3]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out = grad.shape();
    let s = strides(shape, out);
    let mut acc = Tensor::zeros(shape);
    let g = grad.data();
    let dst = acc.data_mut();
    let mut idx = 0;
    for i in 0..out[0] {
        for j in 0..out[1] {
            let r = i * s[0] + j * s[1];
            for k in 0..out[2] {
                dst[r + k * s[2]] += g[idx];
                idx += 1;
            }
        }
    }
    acc
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(1024),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 3] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input leaf whose gradient is reported by [`Gradients::leaf`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The graph node for a stored parameter (created once per graph).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let entry = self.store.entry(id);
        let v = self.push(entry.value.clone(), Op::Param(id), entry.trainable);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = broadcast_zip(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = broadcast_zip(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = broadcast_zip(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(t, Op::AddScalar(a), ng)
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Var {
        let t = self.value(a).map(|x| x.powf(p));
        let ng = self.ng(a);
        self.push(t, Op::Pow(a, p), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(t, Op::Tanh(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(t, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(t, Op::Log(a), ng)
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(t, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = log_softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(t, Op::LogSoftmax(a), ng)
    }

    /// `x · W` with `x: [B, m, k]` and a shared `W: [1, k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let [b, m, k] = self.shape(x);
        let [wb, wk, n] = self.shape(w);
        assert!(wb == 1 && wk == k, "matmul {:?} x {:?}", [b, m, k], [wb, wk, n]);
        let mut out = Tensor::zeros([b, m, n]);
        gemm(
            1,
            b * m,
            k,
            n,
            self.value(x).data(),
            0,
            false,
            self.value(w).data(),
            0,
            false,
            out.data_mut(),
            0,
            false,
        );
        let ng = self.ng(x) || self.ng(w);
        self.push(out, Op::MatMul(x, w), ng)
    }

    /// Batched product; `trans_b` multiplies by the transpose of each `b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let [ba, m, k] = self.shape(a);
        let [bb, r2, c2] = self.shape(b);
        let (kb, n) = if trans_b { (c2, r2) } else { (r2, c2) };
        assert_eq!(k, kb, "bmm inner dims");
        assert!(bb == ba || bb == 1, "bmm batch {ba} vs {bb}");
        let mut out = Tensor::zeros([ba, m, n]);
        gemm(
            ba,
            m,
            k,
            n,
            self.value(a).data(),
            m * k,
            false,
            self.value(b).data(),
            if bb == 1 { 0 } else { k * n },
            trans_b,
            out.data_mut(),
            m * n,
            false,
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Bmm { a, b, trans_b }, ng)
    }

    /// `[B, r, c] → [B, 1, c]`
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let [b, r, c] = x.shape();
        let mut out = Tensor::zeros([b, 1, c]);
        for i in 0..b {
            for j in 0..r {
                let row = x.row_slice(i, j);
                for (o, v) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SumRows(a), ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let r = self.shape(a)[1];
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / r as f64)
    }

    /// `[B, r, c] → [B, r, 1]`
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let [b, r, c] = x.shape();
        let data = x.data().chunks(c).map(|row| row.iter().sum()).collect();
        let ng = self.ng(a);
        self.push(Tensor::from_vec([b, r, 1], data), Op::SumCols(a), ng)
    }

    pub fn mean_cols(&mut self, a: Var) -> Var {
        let c = self.shape(a)[2];
        let s = self.sum_cols(a);
        self.scale(s, 1.0 / c as f64)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let [b, r, c] = self.shape(a);
        let flat = self.reshape(a, [1, b * r * c, 1]);
        self.sum_rows(flat)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: [usize; 3]) -> Var {
        let t = self.value(a).clone().reshaped(shape);
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng)
    }

    /// Concatenate along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let [b, r, _] = self.shape(parts[0]);
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!((s[0], s[1]), (b, r), "concat leading dims");
                s[2]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(b * r * total);
        for row in 0..b * r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[row * w..(row + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::from_vec([b, r, total], data),
            Op::Concat(parts.to_vec()),
            ng,
        )
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let [b, r, c] = x.shape();
        assert!(start + len <= c);
        let mut data = Vec::with_capacity(b * r * len);
        for row in x.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(Tensor::from_vec([b, r, len], data), Op::Slice(a, start), ng)
    }

    /// Per batch entry `i`, the rows `indices[i]` of `a[i]`.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<Vec<usize>>) -> Var {
        let x = self.value(a);
        let [b, r, c] = x.shape();
        assert_eq!(indices.len(), b, "one index list per batch entry");
        let k = indices.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(b * k * c);
        for (i, idx) in indices.iter().enumerate() {
            assert_eq!(idx.len(), k, "equal index counts per batch entry");
            for &j in idx {
                assert!(j < r, "row index {j} out of range {r}");
                data.extend_from_slice(x.row_slice(i, j));
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::from_vec([b, k, c], data), Op::GatherRows(a, indices), ng)
    }

    /// Rows of a `[1, V, c]` table looked up by `ids`, shaped `[b, r, c]`.
    pub fn embed(&mut self, table: Var, ids: Vec<usize>, b: usize, r: usize) -> Var {
        let t = self.value(table);
        let [tb, v, c] = t.shape();
        assert_eq!(tb, 1);
        assert_eq!(ids.len(), b * r);
        let mut data = Vec::with_capacity(b * r * c);
        for &id in &ids {
            assert!(id < v, "embedding id {id} out of range {v}");
            data.extend_from_slice(t.row_slice(0, id));
        }
        let ng = self.ng(table);
        self.push(Tensor::from_vec([b, r, c], data), Op::Embed(table, ids), ng)
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        let mut out = Gradients {
            params: HashMap::new(),
            leaves: HashMap::new(),
        };

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(idx), g);
                }
                Op::Param(id) => {
                    out.params.insert(*id, g);
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, reduce_to(&g, self.shape(*a)));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, reduce_to(&g, self.shape(*b)));
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, reduce_to(&g, self.shape(*a)));
                    }
                    if self.ng(*b) {
                        let neg = g.map(|x| -x);
                        acc(&mut grads, *b, reduce_to(&neg, self.shape(*b)));
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        let ga = broadcast_zip(&g, self.value(*b), |x, y| x * y);
                        acc(&mut grads, *a, reduce_to(&ga, self.shape(*a)));
                    }
                    if self.ng(*b) {
                        let gb = broadcast_zip(&g, self.value(*a), |x, y| x * y);
                        acc(&mut grads, *b, reduce_to(&gb, self.shape(*b)));
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.map(|x| x * s)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Pow(a, p) => {
                    let x = self.value(*a);
                    let d = broadcast_zip(&g, x, |gv, xv| gv * p * xv.powf(p - 1.0));
                    acc(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let d = broadcast_zip(&g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    acc(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = broadcast_zip(&g, y, |gv, yv| gv * yv * (1.0 - yv));
                    acc(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = broadcast_zip(&g, y, |gv, yv| gv * (1.0 - yv * yv));
                    acc(&mut grads, *a, d);
                }
                Op::Exp(a) => {
                    let d = broadcast_zip(&g, y, |gv, yv| gv * yv);
                    acc(&mut grads, *a, d);
                }
                Op::Log(a) => {
                    let d = broadcast_zip(&g, self.value(*a), |gv, xv| gv / xv);
                    acc(&mut grads, *a, d);
                }
                Op::Softmax(a) => {
                    let c = y.cols();
                    let mut d = g.clone();
                    for (drow, yrow) in d.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                        let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for (dv, yv) in drow.iter_mut().zip(yrow) {
                            *dv = yv * (*dv - dot);
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LogSoftmax(a) => {
                    let c = y.cols();
                    let mut d = g.clone();
                    for (drow, yrow) in d.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                        let total: f64 = drow.iter().sum();
                        for (dv, yv) in drow.iter_mut().zip(yrow) {
                            *dv -= yv.exp() * total;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::MatMul(x, w) => {
                    let [b, m, k] = self.shape(*x);
                    let n = self.shape(*w)[2];
                    if self.ng(*x) {
                        let mut dx = Tensor::zeros([b, m, k]);
                        gemm(
                            1,
                            b * m,
                            n,
                            k,
                            g.data(),
                            0,
                            false,
                            self.value(*w).data(),
                            0,
                            true,
                            dx.data_mut(),
                            0,
                            false,
                        );
                        acc(&mut grads, *x, dx);
                    }
                    if self.ng(*w) {
                        let mut dw = Tensor::zeros([1, k, n]);
                        gemm(
                            1,
                            k,
                            b * m,
                            n,
                            self.value(*x).data(),
                            0,
                            true,
                            g.data(),
                            0,
                            false,
                            dw.data_mut(),
                            0,
                            false,
                        );
                        acc(&mut grads, *w, dw);
                    }
                }
                Op::Bmm { a, b, trans_b } => {
                    let [ba, m, k] = self.shape(*a);
                    let bshape = self.shape(*b);
                    let n = if *trans_b { bshape[1] } else { bshape[2] };
                    let b_stride = if bshape[0] == 1 { 0 } else { k * n };
                    if self.ng(*a) {
                        // dA = dC · op(B)ᵀ
                        let mut da = Tensor::zeros([ba, m, k]);
                        gemm(
                            ba,
                            m,
                            n,
                            k,
                            g.data(),
                            m * n,
                            false,
                            self.value(*b).data(),
                            b_stride,
                            !*trans_b,
                            da.data_mut(),
                            m * k,
                            false,
                        );
                        acc(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        let mut db = Tensor::zeros(bshape);
                        let av = self.value(*a).data();
                        for i in 0..ba {
                            let off = if bshape[0] == 1 { 0 } else { i * k * n };
                            let dst = &mut db.data_mut()[off..off + k * n];
                            let gi = &g.data()[i * m * n..(i + 1) * m * n];
                            let ai = &av[i * m * k..(i + 1) * m * k];
                            if *trans_b {
                                // B is [n × k]: dB = dCᵀ · A
                                gemm(1, n, m, k, gi, 0, true, ai, 0, false, dst, 0, true);
                            } else {
                                // B is [k × n]: dB = Aᵀ · dC
                                gemm(1, k, m, n, ai, 0, true, gi, 0, false, dst, 0, true);
                            }
                        }
                        acc(&mut grads, *b, db);
                    }
                }
                Op::SumRows(a) => {
                    let shape = self.shape(*a);
                    acc(&mut grads, *a, reduce_to_expand(&g, shape));
                }
                Op::SumCols(a) => {
                    let shape = self.shape(*a);
                    acc(&mut grads, *a, reduce_to_expand(&g, shape));
                }
                Op::Reshape(a) => {
                    let shape = self.shape(*a);
                    acc(&mut grads, *a, g.reshaped(shape));
                }
                Op::Concat(parts) => {
                    let [b, r, total] = g.shape();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.shape(p)[2];
                        if self.ng(p) {
                            let mut data = Vec::with_capacity(b * r * w);
                            for row in g.data().chunks(total) {
                                data.extend_from_slice(&row[offset..offset + w]);
                            }
                            acc(&mut grads, p, Tensor::from_vec([b, r, w], data));
                        }
                        offset += w;
                    }
                }
                Op::Slice(a, start) => {
                    let shape = self.shape(*a);
                    let len = g.cols();
                    let mut d = Tensor::zeros(shape);
                    for (drow, grow) in d.data_mut().chunks_mut(shape[2]).zip(g.data().chunks(len)) {
                        drow[*start..*start + len].copy_from_slice(grow);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::GatherRows(a, indices) => {
                    let shape = self.shape(*a);
                    let c = shape[2];
                    let mut d = Tensor::zeros(shape);
                    for (i, idx) in indices.iter().enumerate() {
                        for (slot, &j) in idx.iter().enumerate() {
                            let src = g.row_slice(i, slot);
                            let start = (i * shape[1] + j) * c;
                            for (dv, sv) in d.data_mut()[start..start + c].iter_mut().zip(src) {
                                *dv += sv;
                            }
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Embed(table, ids) => {
                    let shape = self.shape(*table);
                    let c = shape[2];
                    let mut d = Tensor::zeros(shape);
                    for (pos, &id) in ids.iter().enumerate() {
                        let src = &g.data()[pos * c..(pos + 1) * c];
                        for (dv, sv) in d.data_mut()[id * c..(id + 1) * c].iter_mut().zip(src) {
                            *dv += sv;
                        }
                    }
                    acc(&mut grads, *table, d);
                }
            }
        }
        out
    }
}

/// Broadcast a reduced gradient back to the input shape.
fn reduce_to_expand(g: &Tensor, shape: [usize; 3]) -> Tensor {
    let ones = Tensor::full(shape, 1.0);
    broadcast_zip(&ones, g, |_, y| y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(
        x0: &Tensor,
        f: impl Fn(&mut Graph, Var) -> Var,
    ) -> (Tensor, Tensor) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(x0.clone());
        let y = f(&mut g, x);
        let analytic = g.backward(y).leaf(x).cloned().unwrap_or(Tensor::zeros(x0.shape()));
        let h = 1e-6;
        let mut numeric = Tensor::zeros(x0.shape());
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += h;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= h;
            let eval = |t: Tensor| {
                let mut g = Graph::new(&store);
                let x = g.constant(t);
                let y = f(&mut g, x);
                g.value(y).data()[0]
            };
            numeric.data_mut()[i] = (eval(plus) - eval(minus)) / (2.0 * h);
        }
        (analytic, numeric)
    }

    fn check(x0: Tensor, f: impl Fn(&mut Graph, Var) -> Var) {
        let (a, n) = numeric_grad(&x0, f);
        let err = a.max_abs_diff(&n);
        assert!(err < 1e-6, "analytic {a:?} numeric {n:?} err {err}");
    }

    fn sample(shape: [usize; 3]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.17 + 0.013).collect())
    }

    #[test]
    fn elementwise_ops_gradients() {
        let x = sample([2, 3, 4]);
        check(x.clone(), |g, x| {
            let s = g.sigmoid(x);
            let t = g.tanh(x);
            let m = g.mul(s, t);
            let e = g.exp(m);
            let r = g.relu(x);
            let p = g.add(e, r);
            g.sum_all(p)
        });
        check(x.map(|v| v.abs() + 0.5), |g, x| {
            let l = g.log(x);
            let p = g.pow(x, -0.5);
            let s = g.sub(l, p);
            g.sum_all(s)
        });
    }

    #[test]
    fn broadcasting_gradients() {
        let x = sample([2, 3, 4]);
        check(x, |g, x| {
            let bias = g.constant(Tensor::row(&[0.1, -0.2, 0.3, 0.4]));
            let m = g.mean_rows(x); // [2,1,4]
            let a = g.add(x, bias);
            let b = g.mul(a, m);
            let c = g.sub(b, m);
            let sq = g.mul(c, c);
            g.sum_all(sq)
        });
    }

    #[test]
    fn softmax_and_matmul_gradients() {
        let x = sample([2, 3, 4]);
        check(x, |g, x| {
            let w = g.constant(sample([1, 4, 5]));
            let y = g.matmul(x, w);
            let s = g.softmax(y);
            let ls = g.log_softmax(y);
            let p = g.mul(s, ls);
            g.sum_all(p)
        });
    }

    #[test]
    fn bmm_gradients_both_sides() {
        let x = sample([2, 3, 4]);
        check(x.clone(), |g, x| {
            let k = g.constant(sample([2, 5, 4]));
            let s = g.bmm(x, k, true); // [2,3,5]
            let v = g.constant(sample([2, 5, 2]));
            let o = g.bmm(s, v, false);
            let sq = g.mul(o, o);
            g.sum_all(sq)
        });
        check(x, |g, x| {
            let a = g.constant(sample([2, 2, 3]));
            let o = g.bmm(a, x, false); // [2,2,4]
            let o2 = g.bmm(o, x, true); // [2,2,3]
            let t = g.tanh(o2);
            g.sum_all(t)
        });
    }

    #[test]
    fn shape_ops_gradients() {
        let x = sample([2, 4, 3]);
        check(x, |g, x| {
            let gathered = g.gather_rows(x, vec![vec![0, 2], vec![3, 3]]);
            let sl = g.slice_cols(x, 1, 2);
            let cat = g.concat(&[sl, x]);
            let sc = g.sum_cols(cat);
            let t = g.tanh(sc);
            let r = g.reshape(gathered, [1, 4, 3]);
            let sq = g.mul(r, r);
            let a = g.sum_all(t);
            let b = g.sum_all(sq);
            g.add(a, b)
        });
    }

    #[test]
    fn embedding_gradient_scatters() {
        let table = sample([1, 5, 3]);
        check(table, |g, t| {
            let e = g.embed(t, vec![1, 1, 4, 0], 2, 2);
            let sq = g.mul(e, e);
            g.sum_all(sq)
        });
    }

    #[test]
    fn param_gradients_are_reported() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(&[1.0, 2.0]), true);
        let frozen = store.add("buf", Tensor::row(&[3.0, 4.0]), false);
        let mut g = Graph::new(&store);
        let w = g.param(id);
        let w_again = g.param(id);
        assert_eq!(w, w_again);
        let b = g.param(frozen);
        let p = g.mul(w, b);
        let s = g.sum_all(p);
        let grads = g.backward(s);
        assert_eq!(grads.param(id).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.param(frozen).is_none());
    }
}
