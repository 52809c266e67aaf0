//! Question-guided clue selection over sampled frames, plus the question
//! encoder and the text-object fusion that feed it.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention_core::{dimension_compress, scaled_dot_attention, AttentionParams};
use crate::autograd::{Graph, Var};
use crate::error::{McdError, Result};
use crate::layers::{Embedding, Forward, Linear, Lstm};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Token ids, type ids and keyword ids for one batch of questions.
#[derive(Clone, Debug, Default)]
pub struct QuestionBatch {
    pub tokens: Vec<Vec<usize>>,
    pub type_ids: Vec<usize>,
    pub keywords: Vec<Vec<usize>>,
}

impl QuestionBatch {
    pub fn len(&self) -> usize {
        self.type_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.type_ids.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct QuestionEncoderParams {
    pub tokens: Embedding,
    pub lstm: Lstm,
    pub types: Embedding,
    pub keywords: Embedding,
    pub text_refine: Linear,
    pub max_len: usize,
}

impl QuestionEncoderParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        dim: usize,
        vocab: &crate::feature_store::VocabSizes,
        max_len: usize,
    ) -> Self {
        Self {
            tokens: Embedding::new(store, rng, "question.tokens", vocab.token, dim),
            lstm: Lstm::new(store, rng, "question.lstm", dim, dim),
            types: Embedding::new(store, rng, "question.types", vocab.question_type, dim),
            keywords: Embedding::new(store, rng, "question.keywords", vocab.keyword.max(1), dim),
            text_refine: Linear::new(store, rng, "question.text_refine", 3 * dim, dim, true),
            max_len,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TextObject {
    pub sentence: Var,
    pub question_type: Var,
    pub keyword: Var,
    /// `f̃_t`, `[B, 1, D]`
    pub fused: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct QuestionEncoding {
    /// `[B, L_q, D]`
    pub token_states: Var,
    /// `f_q`, `[B, 1, D]`
    pub pooled: Var,
    pub text: TextObject,
}

/// Pads `lists` to a rectangle; returns (flat ids, per-row `1/len` weights,
/// width). Empty rows get zero weight.
fn pad_with_weights(lists: &[Vec<usize>], max: Option<usize>) -> (Vec<usize>, Vec<f64>, usize) {
    let longest = lists.iter().map(Vec::len).max().unwrap_or(0);
    let width = max.map_or(longest, |m| longest.min(m)).max(1);
    let mut ids = Vec::with_capacity(lists.len() * width);
    let mut weights = Vec::with_capacity(lists.len() * width);
    for l in lists {
        let used = l.len().min(width);
        for i in 0..width {
            ids.push(if i < used { l[i] } else { 0 });
            weights.push(if i < used { 1.0 / used as f64 } else { 0.0 });
        }
    }
    (ids, weights, width)
}

fn weighted_mean(g: &mut Graph, emb: Var, weights: Vec<f64>) -> Var {
    let [b, r, _] = g.shape(emb);
    let w = g.constant(Tensor::from_vec([b, r, 1], weights));
    let prod = g.mul(emb, w);
    g.sum_rows(prod)
}

/// LSTM question encoding and the refined text object `f̃_t`.
pub fn encode_question(g: &mut Graph, p: &QuestionEncoderParams, q: &QuestionBatch) -> Result<QuestionEncoding> {
    let b = q.len();
    if b == 0 {
        return Err(McdError::Shape("empty question batch".into()));
    }
    if let Some(i) = q.tokens.iter().position(Vec::is_empty) {
        return Err(McdError::Shape(format!("question {i} has no tokens")));
    }
    let (ids, weights, width) = pad_with_weights(&q.tokens, Some(p.max_len));
    let lengths: Vec<usize> = q.tokens.iter().map(|t| t.len().min(width)).collect();
    let emb = p.tokens.forward(g, ids, b, width);
    let (token_states, pooled) = p.lstm.forward(g, emb, &lengths);
    let sentence = weighted_mean(g, emb, weights);
    let question_type = p.types.forward(g, q.type_ids.clone(), b, 1);
    let (kw_ids, kw_weights, kw_width) = pad_with_weights(&q.keywords, None);
    let kw_emb = p.keywords.forward(g, kw_ids, b, kw_width);
    let keyword = weighted_mean(g, kw_emb, kw_weights);
    let joined = g.concat(&[sentence, question_type, keyword]);
    let fused = p.text_refine.forward(g, joined);
    Ok(QuestionEncoding {
        token_states,
        pooled,
        text: TextObject {
            sentence,
            question_type,
            keyword,
            fused,
        },
    })
}

/// `ζ_{j-q}` and `ζ_{q-j}` for one modality; shared across both passes.
#[derive(Clone, Debug)]
pub struct AggregatorParams {
    pub enrich: AttentionParams,
    pub describe: AttentionParams,
}

impl AggregatorParams {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            enrich: AttentionParams::new(store, rng, &format!("{name}.enrich"), dim, heads)?,
            describe: AttentionParams::new(store, rng, &format!("{name}.describe"), dim, heads)?,
        })
    }
}

/// `f̄_q = f_q + ζ(F_j, f_q, f_q)`.
pub fn enrich_question(g: &mut Graph, summary: Var, f_q: Var, p: &AttentionParams) -> Result<Var> {
    let a = scaled_dot_attention(g, summary, f_q, f_q, p)?;
    Ok(g.add(f_q, a.output))
}

/// `h_i = ReLU(ζ(f̄_q, frame_i, frame_i))` for `frames: [B, k, D]`.
pub fn scene_descriptions(g: &mut Graph, f_bar: Var, frames: Var, p: &AttentionParams) -> Result<Var> {
    let [b, k, d] = g.shape(frames);
    if k == 0 {
        return Err(McdError::Shape("no frames to describe".into()));
    }
    let per_frame = g.reshape(frames, [b * k, 1, d]);
    let repeated = g.gather_rows(f_bar, vec![vec![0; k]; b]);
    let queries = g.reshape(repeated, [b * k, 1, d]);
    let a = scaled_dot_attention(g, queries, per_frame, per_frame, p)?;
    let h = g.relu(a.output);
    Ok(g.reshape(h, [b, k, d]))
}

/// Scores and kept frame positions (ascending) per batch entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClueSelection {
    pub scores: Vec<Vec<f64>>,
    pub selected: Vec<Vec<usize>>,
}

pub fn clue_count(k: usize) -> usize {
    (k / 2).max(1)
}

/// Keeps the `⌊k/2⌋` frames with the largest channel-mean score; ties go
/// to the earlier frame, output stays in temporal order.
pub fn topk_select(h: &Tensor) -> ClueSelection {
    let [b, k, d] = h.shape();
    let keep = clue_count(k);
    let mut scores = Vec::with_capacity(b);
    let mut selected = Vec::with_capacity(b);
    for i in 0..b {
        let s: Vec<f64> = (0..k)
            .map(|r| h.row_slice(i, r).iter().sum::<f64>() / d as f64)
            .collect();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&x, &y| s[y].total_cmp(&s[x]).then(x.cmp(&y)));
        let mut top = order[..keep].to_vec();
        top.sort_unstable();
        scores.push(s);
        selected.push(top);
    }
    ClueSelection { scores, selected }
}

/// `Σ_i (f_q + h_i ⊙ f_q)` over `clues: [B, s, D]`, or the mean.
pub fn attach_clues(g: &mut Graph, clues: Var, f_q: Var, mean: bool) -> Result<Var> {
    let s = g.shape(clues)[1];
    if s == 0 {
        return Err(McdError::Shape("no clues selected".into()));
    }
    let scaled = g.mul(clues, f_q);
    let terms = g.add(scaled, f_q);
    Ok(if mean { g.mean_rows(terms) } else { g.sum_rows(terms) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LefTerm {
    #[serde(rename = "F_v")]
    Visual,
    #[serde(rename = "F_a")]
    Audio,
    TextObject,
}

impl LefTerm {
    pub const ALL: [LefTerm; 3] = [Self::Visual, Self::Audio, Self::TextObject];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Visual => "F_v",
            Self::Audio => "F_a",
            Self::TextObject => "text_object",
        }
    }
}

impl fmt::Display for LefTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LefTerm {
    type Err = McdError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| McdError::Config(format!("unknown element-fusion term {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementFusion {
    /// `f̃_t ⊙ (f̃_t + F_v + F_a)`
    #[default]
    AddDot,
    /// `f̃_t + F_v + F_a`
    AddOnly,
}

impl ElementFusion {
    pub const ALL: [ElementFusion; 2] = [Self::AddDot, Self::AddOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::AddDot => "add_dot",
            Self::AddOnly => "add_only",
        }
    }
}

impl fmt::Display for ElementFusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ElementFusion {
    type Err = McdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add_dot" => Ok(Self::AddDot),
            "add_only" => Ok(Self::AddOnly),
            other => Err(McdError::Config(format!("unknown element fusion {other:?}"))),
        }
    }
}

/// `f̃_t ⊙ (f̃_t + F_v + F_a)` before refinement, with terms dropped as asked.
pub fn local_element_fusion(
    g: &mut Graph,
    text: Var,
    f_v: Var,
    f_a: Var,
    drop: &BTreeSet<LefTerm>,
    mode: ElementFusion,
) -> Result<Var> {
    let mut sum: Option<Var> = None;
    let mut push = |g: &mut Graph, v: Var| {
        sum = Some(match sum {
            Some(s) => g.add(s, v),
            None => v,
        });
    };
    let use_text = !drop.contains(&LefTerm::TextObject);
    if use_text {
        push(g, text);
    }
    if !drop.contains(&LefTerm::Visual) {
        push(g, f_v);
    }
    if !drop.contains(&LefTerm::Audio) {
        push(g, f_a);
    }
    let sum = sum.ok_or_else(|| McdError::Config("element fusion with every term dropped".into()))?;
    Ok(if use_text && mode == ElementFusion::AddDot {
        g.mul(text, sum)
    } else {
        sum
    })
}

/// Learned matrices and refinements of the final combination.
#[derive(Clone, Debug)]
pub struct CombineParams {
    pub m_global: ParamId,
    pub m_visual: ParamId,
    pub m_audio: ParamId,
    pub lef_refine: Linear,
    pub refine: Linear,
}

impl CombineParams {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, dim: usize) -> Self {
        let mut near_identity = |name: &str| {
            let mut t = crate::params::normal(rng, [1, dim, dim], 0.02);
            for i in 0..dim {
                t.data_mut()[i * dim + i] += 1.0;
            }
            store.add(format!("combine.{name}"), t, true)
        };
        let m_global = near_identity("m_global");
        let m_visual = near_identity("m_visual");
        let m_audio = near_identity("m_audio");
        Self {
            m_global,
            m_visual,
            m_audio,
            lef_refine: Linear::new(store, rng, "combine.lef_refine", dim, dim, true),
            refine: Linear::new(store, rng, "combine.refine", 3 * dim, dim, true),
        }
    }
}

/// `refine([f̃_g·M_g, f̂_vq·M_vq, f̂_aq·M_aq])`.
pub fn combine(g: &mut Graph, global: Var, visual: Var, audio: Var, p: &CombineParams) -> Var {
    let mut parts = Vec::with_capacity(3);
    for (x, m) in [(global, p.m_global), (visual, p.m_visual), (audio, p.m_audio)] {
        let w = g.param(m);
        parts.push(g.matmul(x, w));
    }
    let joined = g.concat(&parts);
    p.refine.forward(g, joined)
}

/// How frames are picked for clue scoring.
pub fn sample_frames(len: usize, k: usize, train: bool, rng: &mut Rng) -> Vec<usize> {
    let k = k.min(len);
    if train {
        rng.sample_sorted(len, k)
    } else if k == 1 {
        vec![len / 2]
    } else {
        (0..k).map(|i| (i * (len - 1) + (k - 1) / 2) / (k - 1)).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AggregateConfig {
    pub attach_mean: bool,
    /// Average a pass over the unrefined features with the refined pass.
    pub early_pass: bool,
    pub dropout: f64,
}

/// Clue outcome for one modality at one level.
#[derive(Clone, Debug)]
pub struct LevelClues {
    pub frames: Vec<Vec<usize>>,
    pub selection: ClueSelection,
    pub attached: Var,
}

impl LevelClues {
    /// Selected positions mapped back to frame indices of the full sequence.
    pub fn selected_frames(&self) -> Vec<Vec<usize>> {
        self.frames
            .iter()
            .zip(&self.selection.selected)
            .map(|(f, s)| s.iter().map(|&i| f[i]).collect())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ModalityClues {
    pub low: Option<LevelClues>,
    pub high: LevelClues,
    /// `f̂_jq`
    pub embedding: Var,
}

#[derive(Clone, Debug)]
pub struct AggregateOutput {
    pub visual: ModalityClues,
    pub audio: ModalityClues,
    /// Temporal means of the refined streams.
    pub summary_visual: Var,
    pub summary_audio: Var,
    /// `f̃_g`
    pub global: Var,
    /// `f̂_q`
    pub fused: Var,
}

pub struct AggregateInputs<'a> {
    pub low_visual: Var,
    pub low_audio: Var,
    pub high_visual: Var,
    pub high_audio: Var,
    pub question: &'a QuestionEncoding,
    pub frames_visual: &'a [Vec<usize>],
    pub frames_audio: &'a [Vec<usize>],
}

fn level(
    g: &mut Graph,
    seq: Var,
    frames: &[Vec<usize>],
    f_q: Var,
    p: &AggregatorParams,
    attach_mean: bool,
) -> Result<LevelClues> {
    let sampled = g.gather_rows(seq, frames.to_vec());
    let summary = dimension_compress(g, sampled)?;
    let f_bar = enrich_question(g, summary, f_q, &p.enrich)?;
    let h = scene_descriptions(g, f_bar, sampled, &p.describe)?;
    let selection = topk_select(g.value(h));
    let clues = g.gather_rows(h, selection.selected.clone());
    let attached = attach_clues(g, clues, f_q, attach_mean)?;
    Ok(LevelClues {
        frames: frames.to_vec(),
        selection,
        attached,
    })
}

fn modality(
    g: &mut Graph,
    low: Var,
    high: Var,
    frames: &[Vec<usize>],
    f_q: Var,
    p: &AggregatorParams,
    cfg: &AggregateConfig,
) -> Result<ModalityClues> {
    let high = level(g, high, frames, f_q, p, cfg.attach_mean)?;
    if !cfg.early_pass {
        let embedding = high.attached;
        return Ok(ModalityClues {
            low: None,
            high,
            embedding,
        });
    }
    let low = level(g, low, frames, f_q, p, cfg.attach_mean)?;
    let both = g.add(low.attached, high.attached);
    let embedding = g.scale(both, 0.5);
    Ok(ModalityClues {
        low: Some(low),
        high,
        embedding,
    })
}

pub struct AggregateParams<'a> {
    pub visual: &'a AggregatorParams,
    pub audio: &'a AggregatorParams,
    pub combine: &'a CombineParams,
    pub lef_drop: &'a BTreeSet<LefTerm>,
    pub element_fusion: ElementFusion,
}

/// Clue selection on both modalities, element fusion and the final
/// combination into `f̂_q`.
pub fn aggregate(
    fw: &mut Forward,
    inputs: &AggregateInputs,
    p: &AggregateParams,
    cfg: &AggregateConfig,
) -> Result<AggregateOutput> {
    let f_q = inputs.question.pooled;
    let g = &mut fw.g;
    let visual = modality(g, inputs.low_visual, inputs.high_visual, inputs.frames_visual, f_q, p.visual, cfg)?;
    let audio = modality(g, inputs.low_audio, inputs.high_audio, inputs.frames_audio, f_q, p.audio, cfg)?;
    let summary_visual = dimension_compress(g, inputs.high_visual)?;
    let summary_audio = dimension_compress(g, inputs.high_audio)?;
    let lef = local_element_fusion(
        g,
        inputs.question.text.fused,
        summary_visual,
        summary_audio,
        p.lef_drop,
        p.element_fusion,
    )?;
    let lef = fw.dropout(lef, cfg.dropout);
    let global = p.combine.lef_refine.forward(&mut fw.g, lef);
    let fused = combine(&mut fw.g, global, visual.embedding, audio.embedding, p.combine);
    Ok(AggregateOutput {
        visual,
        audio,
        summary_visual,
        summary_audio,
        global,
        fused,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn topk_keeps_half_in_temporal_order() {
        let h = Tensor::matrix(&[&[0.1], &[0.9], &[0.3], &[0.8], &[0.2], &[0.7]]);
        let s = topk_select(&h);
        assert_eq!(s.selected, vec![vec![1, 3, 5]]);
    }

    #[test]
    fn topk_ties_prefer_earlier_frames() {
        let h = Tensor::matrix(&[&[0.5], &[0.5], &[0.5], &[0.5]]);
        assert_eq!(topk_select(&h).selected, vec![vec![0, 1]]);
        let one = Tensor::matrix(&[&[0.5]]);
        assert_eq!(topk_select(&one).selected, vec![vec![0]]);
    }

    #[test]
    fn attach_sums_question_gated_clues() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let clues = g.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 0.0]]));
        let fq = g.constant(Tensor::row(&[2.0, -1.0]));
        let sum = attach_clues(&mut g, clues, fq, false).unwrap();
        // (2 + 2) + (2 + 6), (-1 - 2) + (-1 + 0)
        assert_eq!(g.value(sum).data(), &[12.0, -4.0]);
        let mean = attach_clues(&mut g, clues, fq, true).unwrap();
        assert_eq!(g.value(mean).data(), &[6.0, -2.0]);
        let none = g.constant(Tensor::zeros([1, 0, 2]));
        assert!(attach_clues(&mut g, none, fq, false).is_err());
    }

    #[test]
    fn element_fusion_variants() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let t = g.constant(Tensor::row(&[2.0]));
        let v = g.constant(Tensor::row(&[3.0]));
        let a = g.constant(Tensor::row(&[5.0]));
        let run = |g: &mut Graph, drop: &[LefTerm], mode| {
            let set: BTreeSet<_> = drop.iter().copied().collect();
            let out = local_element_fusion(g, t, v, a, &set, mode).unwrap();
            g.value(out).data()[0]
        };
        assert_eq!(run(&mut g, &[], ElementFusion::AddDot), 20.0);
        assert_eq!(run(&mut g, &[], ElementFusion::AddOnly), 10.0);
        assert_eq!(run(&mut g, &[LefTerm::Visual], ElementFusion::AddDot), 14.0);
        assert_eq!(run(&mut g, &[LefTerm::Audio], ElementFusion::AddDot), 10.0);
        assert_eq!(run(&mut g, &[LefTerm::TextObject], ElementFusion::AddDot), 8.0);
    }

    #[test]
    fn evenly_spaced_eval_frames() {
        let mut rng = Rng::new(0);
        assert_eq!(sample_frames(12, 12, false, &mut rng), (0..12).collect::<Vec<_>>());
        assert_eq!(sample_frames(5, 12, false, &mut rng), vec![0, 1, 2, 3, 4]);
        assert_eq!(sample_frames(10, 4, false, &mut rng), vec![0, 3, 6, 9]);
        let t = sample_frames(20, 12, true, &mut rng);
        assert_eq!(t.len(), 12);
        assert!(t.windows(2).all(|w| w[0] < w[1]) && t[11] < 20);
    }

    #[test]
    fn question_encoder_shapes() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(2);
        let vocab = crate::feature_store::VocabSizes {
            token: 12,
            question_type: 3,
            keyword: 4,
            answer: 5,
        };
        let p = QuestionEncoderParams::new(&mut store, &mut rng, 6, &vocab, 3);
        let q = QuestionBatch {
            tokens: vec![vec![1, 2, 3, 4, 5], vec![7]],
            type_ids: vec![0, 2],
            keywords: vec![vec![1], vec![]],
        };
        let mut g = Graph::new(&store);
        let e = encode_question(&mut g, &p, &q).unwrap();
        assert_eq!(g.shape(e.token_states), [2, 3, 6]);
        assert_eq!(g.shape(e.pooled), [2, 1, 6]);
        assert_eq!(g.shape(e.text.fused), [2, 1, 6]);
        // no keywords gives a zero keyword embedding
        assert!(g.value(e.text.keyword).row_slice(1, 0).iter().all(|&x| x == 0.0));
        let empty = QuestionBatch {
            tokens: vec![vec![]],
            type_ids: vec![0],
            keywords: vec![vec![]],
        };
        assert!(encode_question(&mut g, &p, &empty).is_err());
    }

    #[test]
    fn enriched_question_uses_single_key_shortcut() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(9);
        let p = AttentionParams::new(&mut store, &mut rng, "e", 3, 1).unwrap();
        let fq_t = normal(&mut rng, [2, 1, 3], 1.0);
        let mut g = Graph::new(&store);
        let summary = g.constant(normal(&mut rng, [2, 1, 3], 1.0));
        let fq = g.constant(fq_t.clone());
        let out = enrich_question(&mut g, summary, fq, &p).unwrap();
        let w = g.param(p.w_v);
        let proj = g.matmul(fq, w);
        let expected = g.add(fq, proj);
        assert!(g.value(out).max_abs_diff(g.value(expected)) < 1e-12);
    }

    #[test]
    fn enriched_question_value_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(4);
        let p = AttentionParams::new(&mut store, &mut rng, "e", 4, 1).unwrap();
        let fq = normal(&mut rng, [2, 1, 4], 1.0);
        let summary = normal(&mut rng, [2, 1, 4], 1.0);
        let probe = normal(&mut rng, [2, 1, 4], 1.0);
        let objective = |store: &ParamStore| {
            let mut g = Graph::new(store);
            let s = g.constant(summary.clone());
            let q = g.constant(fq.clone());
            let c = g.constant(probe.clone());
            let out = enrich_question(&mut g, s, q, &p).unwrap();
            let weighted = g.mul(out, c);
            let loss = g.sum_all(weighted);
            let grads = g.backward(loss);
            (g.value(loss).data()[0], grads.param(p.w_v).cloned())
        };
        let analytic = objective(&store).1.unwrap();
        let h = 1e-5;
        for i in 0..analytic.len() {
            let orig = store.get(p.w_v).data()[i];
            store.get_mut(p.w_v).data_mut()[i] = orig + h;
            let up = objective(&store).0;
            store.get_mut(p.w_v).data_mut()[i] = orig - h;
            let down = objective(&store).0;
            store.get_mut(p.w_v).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6) <= 1e-4, "{i}: {a} vs {numeric}");
        }
    }

    proptest! {
        #[test]
        fn topk_selects_the_largest_scores(vals in proptest::collection::vec(-5.0f64..5.0, 1..16)) {
            let k = vals.len();
            let h = Tensor::from_vec([1, k, 1], vals.clone());
            let s = topk_select(&h);
            let kept = &s.selected[0];
            prop_assert_eq!(kept.len(), clue_count(k));
            prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
            let min_kept = kept.iter().map(|&i| vals[i]).fold(f64::INFINITY, f64::min);
            for i in (0..k).filter(|i| !kept.contains(i)) {
                prop_assert!(vals[i] <= min_kept);
            }
        }
    }
}
