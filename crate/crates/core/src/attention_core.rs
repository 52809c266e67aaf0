//! Scaled dot-product attention, channel gating and the stacked
//! audio-visual association blocks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{McdError, Result};
use crate::layers::{BatchNorm, FeedForward, Forward};
use crate::params::{uniform_fan_in, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Projections for one attention operator.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub heads: usize,
    /// Divisor under the square root; the per-head width unless overridden.
    pub scale_dim: f64,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(McdError::Config(format!("{heads} heads do not divide width {dim}")));
        }
        let mut proj = |suffix: &str| {
            store.add(format!("{name}.{suffix}"), uniform_fan_in(rng, [1, dim, dim], dim), true)
        };
        Ok(Self {
            w_q: proj("w_q"),
            w_k: proj("w_k"),
            w_v: proj("w_v"),
            heads,
            scale_dim: (dim / heads) as f64,
        })
    }

    /// Fixed projections, used by tests and oracles.
    pub fn from_matrices(store: &mut ParamStore, name: &str, w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Self {
        let d = w_q.cols();
        Self {
            w_q: store.add(format!("{name}.w_q"), w_q, true),
            w_k: store.add(format!("{name}.w_k"), w_k, true),
            w_v: store.add(format!("{name}.w_v"), w_v, true),
            heads: 1,
            scale_dim: d as f64,
        }
    }
}

/// Output rows and head-averaged attention weights (`[B, m, n]`).
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub output: Var,
    pub weights: Var,
}

/// `softmax(QKᵀ/√d)·V` for `q: [B, m, D]` against `k, v: [B, n, D]`.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var, p: &AttentionParams) -> Result<Attended> {
    let [b, m, _] = g.shape(q);
    let [bk, n, _] = g.shape(k);
    if n == 0 {
        return Err(McdError::Shape("attention over an empty key sequence".into()));
    }
    if bk != b || g.shape(v)[..2] != g.shape(k)[..2] {
        return Err(McdError::Shape(format!(
            "attention shapes q {:?}, k {:?}, v {:?}",
            g.shape(q),
            g.shape(k),
            g.shape(v)
        )));
    }
    let w_v = g.param(p.w_v);
    let values = g.matmul(v, w_v);
    if n == 1 {
        // the softmax over one key is identically 1
        let ones = g.constant(Tensor::full([b, m, 1], 1.0));
        let output = g.mul(ones, values);
        return Ok(Attended { output, weights: ones });
    }
    let w_q = g.param(p.w_q);
    let w_k = g.param(p.w_k);
    let queries = g.matmul(q, w_q);
    let keys = g.matmul(k, w_k);
    let dim = g.shape(values)[2];
    let head = dim / p.heads;
    let inv = 1.0 / p.scale_dim.sqrt();
    let mut outputs = Vec::with_capacity(p.heads);
    let mut weights: Option<Var> = None;
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (queries, keys, values)
        } else {
            (
                g.slice_cols(queries, h * head, head),
                g.slice_cols(keys, h * head, head),
                g.slice_cols(values, h * head, head),
            )
        };
        let scores = g.bmm(qh, kh, true);
        let scores = g.scale(scores, inv);
        let w = g.softmax(scores);
        outputs.push(g.bmm(w, vh, false));
        weights = Some(match weights {
            Some(acc) => g.add(acc, w),
            None => w,
        });
    }
    let output = if outputs.len() == 1 { outputs[0] } else { g.concat(&outputs) };
    let mut weights = weights.expect("at least one head");
    if p.heads > 1 {
        weights = g.scale(weights, 1.0 / p.heads as f64);
    }
    Ok(Attended { output, weights })
}

/// Temporal mean `[B, L, D] → [B, 1, D]`.
pub fn dimension_compress(g: &mut Graph, seq: Var) -> Result<Var> {
    if g.shape(seq)[1] == 0 {
        return Err(McdError::Shape("cannot compress an empty sequence".into()));
    }
    Ok(g.mean_rows(seq))
}

/// Channel gate of `f_self` driven by the other modality's summary.
#[derive(Clone, Copy, Debug)]
pub struct CrossGate {
    /// `f_self ⊙ a`, `[B, L, D]`
    pub gated: Var,
    /// The attended vector `a` (`[B, 1, D]`): the diagonal of the gate.
    pub attended: Var,
}

impl CrossGate {
    /// The gate as explicit `D × D` diagonal matrices, one per batch entry.
    pub fn gate_matrix(&self, g: &Graph) -> Tensor {
        let a = g.value(self.attended);
        let [b, _, d] = a.shape();
        let mut out = Tensor::zeros([b, d, d]);
        for i in 0..b {
            for j in 0..d {
                out.data_mut()[i * d * d + j * d + j] = a.at(i, 0, j);
            }
        }
        out
    }
}

/// `f_self × W`, `W = diag(φ(F_other, f_self, f_self))`.
pub fn cross_gate(g: &mut Graph, summary_other: Var, f_self: Var, p: &AttentionParams) -> Result<CrossGate> {
    let a = scaled_dot_attention(g, summary_other, f_self, f_self, p)?;
    let gated = g.mul(f_self, a.output);
    Ok(CrossGate {
        gated,
        attended: a.output,
    })
}

/// Which attention branches feed each stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wiring {
    pub self_audio: bool,
    pub self_visual: bool,
    /// Audio summary queries the visual stream (gates visual).
    pub audio_query: bool,
    /// Visual summary queries the audio stream (gates audio).
    pub visual_query: bool,
}

impl Wiring {
    pub fn visual_active(&self) -> bool {
        self.self_visual || self.audio_query
    }

    pub fn audio_active(&self) -> bool {
        self.self_audio || self.visual_query
    }

    pub fn any(&self) -> bool {
        self.visual_active() || self.audio_active()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Association blocks bypassed entirely.
    Off,
    SelfA,
    SelfV,
    SelfAv,
    CrossAq,
    CrossVq,
    CrossBoth,
    BidirAq,
    BidirVq,
    #[default]
    BidirFull,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 10] = [
        Self::Off,
        Self::SelfA,
        Self::SelfV,
        Self::SelfAv,
        Self::CrossAq,
        Self::CrossVq,
        Self::CrossBoth,
        Self::BidirAq,
        Self::BidirVq,
        Self::BidirFull,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Off => "off",
            Self::SelfA => "self_a",
            Self::SelfV => "self_v",
            Self::SelfAv => "self_av",
            Self::CrossAq => "cross_aq",
            Self::CrossVq => "cross_vq",
            Self::CrossBoth => "cross_both",
            Self::BidirAq => "bidir_aq",
            Self::BidirVq => "bidir_vq",
            Self::BidirFull => "bidir_full",
        }
    }

    pub fn wiring(self) -> Wiring {
        let (sa, sv, aq, vq) = match self {
            Self::Off => (false, false, false, false),
            Self::SelfA => (true, false, false, false),
            Self::SelfV => (false, true, false, false),
            Self::SelfAv => (true, true, false, false),
            Self::CrossAq => (false, false, true, false),
            Self::CrossVq => (false, false, false, true),
            Self::CrossBoth => (false, false, true, true),
            Self::BidirAq => (true, true, true, false),
            Self::BidirVq => (true, true, false, true),
            Self::BidirFull => (true, true, true, true),
        };
        Wiring {
            self_audio: sa,
            self_visual: sv,
            audio_query: aq,
            visual_query: vq,
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionMode {
    type Err = McdError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| McdError::Config(format!("unknown attention mode {s:?}")))
    }
}

/// Parameters of one modality's half of a block.
#[derive(Clone, Debug)]
pub struct StreamParams {
    pub self_attn: Option<AttentionParams>,
    /// Gate driven by the other modality's summary.
    pub cross: Option<AttentionParams>,
    pub bn_attn: BatchNorm,
    pub ffn: FeedForward,
    pub bn_ffn: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub visual: Option<StreamParams>,
    pub audio: Option<StreamParams>,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockConfig {
    pub dim: usize,
    pub ffn_hidden: usize,
    pub heads: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl BlockParams {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, wiring: Wiring, cfg: &BlockConfig) -> Result<Self> {
        let mut stream = |tag: &str, self_on: bool, cross_on: bool| -> Result<Option<StreamParams>> {
            if !self_on && !cross_on {
                return Ok(None);
            }
            let base = format!("{name}.{tag}");
            let self_attn = if self_on {
                Some(AttentionParams::new(store, rng, &format!("{base}.self"), cfg.dim, cfg.heads)?)
            } else {
                None
            };
            let cross = if cross_on {
                Some(AttentionParams::new(store, rng, &format!("{base}.cross"), cfg.dim, cfg.heads)?)
            } else {
                None
            };
            Ok(Some(StreamParams {
                self_attn,
                cross,
                bn_attn: BatchNorm::new(store, &format!("{base}.bn_attn"), cfg.dim, cfg.bn_eps, cfg.bn_momentum),
                ffn: FeedForward::new(store, rng, &format!("{base}.ffn"), cfg.dim, cfg.ffn_hidden),
                bn_ffn: BatchNorm::new(store, &format!("{base}.bn_ffn"), cfg.dim, cfg.bn_eps, cfg.bn_momentum),
            }))
        };
        Ok(Self {
            visual: stream("visual", wiring.self_visual, wiring.audio_query)?,
            audio: stream("audio", wiring.self_audio, wiring.visual_query)?,
        })
    }
}

/// Attention output `f_{j2o}` of one stream plus its gated cross features.
#[derive(Clone, Copy, Debug)]
pub struct StreamAttention {
    pub combined: Var,
    pub cross: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct BidirOutput {
    /// `f_{v2a}`, absent when the visual stream has no active branch.
    pub visual: Option<StreamAttention>,
    /// `f_{a2v}`
    pub audio: Option<StreamAttention>,
}

fn stream_attention(
    g: &mut Graph,
    f_self: Var,
    summary_other: Var,
    p: &StreamParams,
) -> Result<StreamAttention> {
    let mut combined = None;
    let mut cross = None;
    if let Some(sp) = &p.self_attn {
        combined = Some(scaled_dot_attention(g, f_self, f_self, f_self, sp)?.output);
    }
    if let Some(cp) = &p.cross {
        let gate = cross_gate(g, summary_other, f_self, cp)?;
        cross = Some(gate.gated);
        combined = Some(match combined {
            Some(s) => g.add(s, gate.gated),
            None => gate.gated,
        });
    }
    Ok(StreamAttention {
        combined: combined.expect("stream params exist only with an active branch"),
        cross,
    })
}

/// Self attention plus other-modality gating for both streams.
pub fn bidirectional_inter_attention(g: &mut Graph, f_v: Var, f_a: Var, block: &BlockParams) -> Result<BidirOutput> {
    let summary_v = dimension_compress(g, f_v)?;
    let summary_a = dimension_compress(g, f_a)?;
    let visual = block
        .visual
        .as_ref()
        .map(|p| stream_attention(g, f_v, summary_a, p))
        .transpose()?;
    let audio = block
        .audio
        .as_ref()
        .map(|p| stream_attention(g, f_a, summary_v, p))
        .transpose()?;
    Ok(BidirOutput { visual, audio })
}

fn refine(fw: &mut Forward, f: Var, attn: Var, p: &StreamParams) -> Var {
    let a = p.bn_attn.forward(fw, attn);
    let y = fw.g.add(f, a);
    let h = p.ffn.forward(&mut fw.g, y);
    let h = p.bn_ffn.forward(fw, h);
    fw.g.add(y, h)
}

#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub visual: Var,
    pub audio: Var,
    pub visual_cross: Option<Var>,
    pub audio_cross: Option<Var>,
}

/// `f̂ = f + BN(f2o) + BN(FFN(f + BN(f2o)))`; inactive streams pass through.
pub fn association_block(fw: &mut Forward, f_v: Var, f_a: Var, block: &BlockParams) -> Result<BlockOutput> {
    let bi = bidirectional_inter_attention(&mut fw.g, f_v, f_a, block)?;
    let mut out = BlockOutput {
        visual: f_v,
        audio: f_a,
        visual_cross: None,
        audio_cross: None,
    };
    if let (Some(att), Some(p)) = (bi.visual, &block.visual) {
        out.visual = refine(fw, f_v, att.combined, p);
        out.visual_cross = att.cross;
    }
    if let (Some(att), Some(p)) = (bi.audio, &block.audio) {
        out.audio = refine(fw, f_a, att.combined, p);
        out.audio_cross = att.cross;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct StackOutput {
    pub visual: Var,
    pub audio: Var,
    /// Gated visual features per block that produced them.
    pub visual_cross: Vec<Var>,
    pub audio_cross: Vec<Var>,
}

pub fn run_association_stack(fw: &mut Forward, f_v: Var, f_a: Var, blocks: &[BlockParams]) -> Result<StackOutput> {
    if blocks.is_empty() {
        return Err(McdError::Config("association stack needs at least one block".into()));
    }
    let mut out = StackOutput {
        visual: f_v,
        audio: f_a,
        visual_cross: Vec::new(),
        audio_cross: Vec::new(),
    };
    for block in blocks {
        let o = association_block(fw, out.visual, out.audio, block)?;
        out.visual = o.visual;
        out.audio = o.audio;
        out.visual_cross.extend(o.visual_cross);
        out.audio_cross.extend(o.audio_cross);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;
    use crate::params::normal;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn eye(store: &mut ParamStore, d: usize) -> AttentionParams {
        let i = Tensor::identity(d);
        AttentionParams::from_matrices(store, "a", i.clone(), i.clone(), i)
    }

    #[test]
    fn two_key_oracle() {
        let mut store = ParamStore::new();
        let p = eye(&mut store, 2);
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::row(&[1.0, 0.0]));
        let kv = g.constant(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let a = scaled_dot_attention(&mut g, q, kv, kv, &p).unwrap();
        let w = g.value(a.weights).data().to_vec();
        let hi = 1.0 / (1.0 + (-1.0 / 2f64.sqrt()).exp());
        assert!((w[0] - hi).abs() < 1e-12 && (w[0] - 0.66976).abs() < 1e-5);
        assert!((w[1] - (1.0 - hi)).abs() < 1e-12 && (w[1] - 0.33024).abs() < 1e-5);
        let o = g.value(a.output).data().to_vec();
        assert!((o[0] - w[0]).abs() < 1e-12 && (o[1] - w[1]).abs() < 1e-12);
    }

    #[test]
    fn single_key_returns_projected_value() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let p = AttentionParams::new(&mut store, &mut rng, "a", 3, 1).unwrap();
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::row(&[5.0, -2.0, 0.1]));
        let k = g.constant(Tensor::row(&[0.3, 0.3, 0.3]));
        let v = g.constant(Tensor::row(&[1.0, 2.0, 3.0]));
        let a = scaled_dot_attention(&mut g, q, k, v, &p).unwrap();
        assert_eq!(g.value(a.weights).data(), &[1.0]);
        let w = store.get(p.w_v);
        for c in 0..3 {
            let expected: f64 = (0..3).map(|r| [1.0, 2.0, 3.0][r] * w.at(0, r, c)).sum();
            assert!((g.value(a.output).data()[c] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_keys_are_an_error() {
        let mut store = ParamStore::new();
        let p = eye(&mut store, 2);
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::row(&[1.0, 0.0]));
        let k = g.constant(Tensor::zeros([1, 0, 2]));
        assert!(scaled_dot_attention(&mut g, q, k, k, &p).is_err());
    }

    #[test]
    fn extreme_magnitudes_match_float64_oracle() {
        let mut store = ParamStore::new();
        let p = eye(&mut store, 2);
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::row(&[1e3, -1e3]));
        let kv = g.constant(Tensor::matrix(&[&[1e3, 0.0], &[0.0, 1e3], &[-1e3, 1e3]]));
        let a = scaled_dot_attention(&mut g, q, kv, kv, &p).unwrap();
        let s: Vec<f64> = [1e6, -1e6, -2e6].iter().map(|x| x / 2f64.sqrt()).collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
        let w = g.value(a.weights);
        assert!(w.all_finite());
        for (i, x) in s.iter().enumerate() {
            assert!((w.data()[i] - (x - m).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_matrix_is_diagonal_of_attended() {
        let mut store = ParamStore::new();
        let p = eye(&mut store, 2);
        let mut g = Graph::new(&store);
        let other = g.constant(Tensor::row(&[1.0, 0.0]));
        let f = g.constant(Tensor::matrix(&[&[2.0, 4.0], &[6.0, 8.0]]));
        let gate = cross_gate(&mut g, other, f, &p).unwrap();
        let m = gate.gate_matrix(&g);
        let a = g.value(gate.attended).data().to_vec();
        assert_eq!(m.data(), &[a[0], 0.0, 0.0, a[1]]);
        let gated = g.value(gate.gated).data().to_vec();
        assert_eq!(gated, vec![2.0 * a[0], 4.0 * a[1], 6.0 * a[0], 8.0 * a[1]]);
    }

    fn block_cfg(dim: usize) -> BlockConfig {
        BlockConfig {
            dim,
            ffn_hidden: 2 * dim,
            heads: 1,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    #[test]
    fn zeroed_batch_norm_gains_make_the_block_an_identity() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(5);
        let block = BlockParams::new(&mut store, &mut rng, "b", AttentionMode::BidirFull.wiring(), &block_cfg(4)).unwrap();
        for s in [block.visual.as_ref().unwrap(), block.audio.as_ref().unwrap()] {
            for bn in [&s.bn_attn, &s.bn_ffn] {
                store.set(bn.gamma, Tensor::zeros([1, 1, 4]));
            }
        }
        let fv = normal(&mut rng, [2, 3, 4], 1.0);
        let fa = normal(&mut rng, [2, 5, 4], 1.0);
        let mut fw = Forward::new(&store, Mode::Train, 0);
        let (v, a) = (fw.g.constant(fv.clone()), fw.g.constant(fa.clone()));
        let out = association_block(&mut fw, v, a, &block).unwrap();
        assert!(fw.g.value(out.visual).max_abs_diff(&fv) < 1e-12);
        assert!(fw.g.value(out.audio).max_abs_diff(&fa) < 1e-12);
    }

    #[test]
    fn inactive_stream_passes_through() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(5);
        let block = BlockParams::new(&mut store, &mut rng, "b", AttentionMode::SelfA.wiring(), &block_cfg(4)).unwrap();
        assert!(block.visual.is_none());
        let fv = normal(&mut rng, [2, 3, 4], 1.0);
        let fa = normal(&mut rng, [2, 3, 4], 1.0);
        let mut fw = Forward::new(&store, Mode::Train, 0);
        let (v, a) = (fw.g.constant(fv.clone()), fw.g.constant(fa.clone()));
        let out = run_association_stack(&mut fw, v, a, &[block]).unwrap();
        assert_eq!(fw.g.value(out.visual), &fv);
        assert!(fw.g.value(out.audio).max_abs_diff(&fa) > 1e-3);
        assert!(out.visual_cross.is_empty() && out.audio_cross.is_empty());
    }

    #[test]
    fn empty_stack_is_rejected() {
        let store = ParamStore::new();
        let mut fw = Forward::new(&store, Mode::Eval, 0);
        let v = fw.g.constant(Tensor::row(&[1.0]));
        assert!(run_association_stack(&mut fw, v, v, &[]).is_err());
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in AttentionMode::ALL {
            assert_eq!(m.as_str().parse::<AttentionMode>().unwrap(), m);
        }
        assert!(!AttentionMode::Off.wiring().any());
        assert!("sideways".parse::<AttentionMode>().is_err());
    }

    proptest! {
        #[test]
        fn stack_is_frame_permutation_equivariant(seed in 0u64..1000, shift in 1usize..4) {
            let mut store = ParamStore::new();
            let mut rng = Rng::new(seed);
            let blocks: Vec<_> = (0..2)
                .map(|i| BlockParams::new(&mut store, &mut rng, &format!("b{i}"), AttentionMode::BidirFull.wiring(), &block_cfg(3)).unwrap())
                .collect();
            let fv = normal(&mut rng, [1, 4, 3], 1.0);
            let fa = normal(&mut rng, [1, 4, 3], 1.0);
            let perm: Vec<usize> = (0..4).map(|i| (i + shift) % 4).collect();
            let permute = |t: &Tensor| {
                let mut out = Tensor::zeros(t.shape());
                for (dst, &src) in perm.iter().enumerate() {
                    out.data_mut()[dst * 3..dst * 3 + 3].copy_from_slice(t.row_slice(0, src));
                }
                out
            };
            let run = |v: Tensor, a: Tensor| {
                let mut fw = Forward::new(&store, Mode::Eval, 0);
                let (v, a) = (fw.g.constant(v), fw.g.constant(a));
                let o = run_association_stack(&mut fw, v, a, &blocks).unwrap();
                (fw.g.value(o.visual).clone(), fw.g.value(o.audio).clone())
            };
            let (v0, a0) = run(fv.clone(), fa.clone());
            let (v1, a1) = run(permute(&fv), permute(&fa));
            prop_assert!(permute(&v0).max_abs_diff(&v1) < 1e-9);
            prop_assert!(permute(&a0).max_abs_diff(&a1) < 1e-9);
        }
    }
}
