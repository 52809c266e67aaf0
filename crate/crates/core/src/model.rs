//! The full network: association stack, clue aggregation, semantic
//! approximation losses and the answer head, switchable by [`AblationMode`].

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention_core::{run_association_stack, AttentionMode, BlockConfig, BlockParams};
use crate::autograd::Var;
use crate::clue_aggregator::{
    aggregate, encode_question, sample_frames, AggregateConfig, AggregateInputs, AggregateOutput,
    AggregateParams, AggregatorParams, CombineParams, ElementFusion, LefTerm, QuestionBatch,
    QuestionEncoderParams,
};
use crate::error::{McdError, Result};
use crate::feature_store::{DatasetManifest, FeatureBundle, FeatureMatrix, VocabSizes};
use crate::layers::{Forward, Linear, Mode};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::semantic_approx::{av_contrast_loss, cross_summary, distill_loss, ContrastConfig, LatentProjector};
use crate::tensor::Tensor;
use crate::trainer::head::{cross_entropy, prediction_from_logits, LossBreakdown, Prediction, PredictionHead};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Head reads `f̂_q` only.
    #[default]
    None,
    Concat,
    Add,
}

impl Fusion {
    pub const ALL: [Fusion; 3] = [Self::None, Self::Concat, Self::Add];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Concat => "concat",
            Self::Add => "add",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    DistillV,
    DistillA,
    Av,
}

impl LossTerm {
    pub const ALL: [LossTerm; 3] = [Self::DistillV, Self::DistillA, Self::Av];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::DistillV => "distill_v",
            Self::DistillA => "distill_a",
            Self::Av => "av",
        }
    }
}

macro_rules! str_enum {
    ($t:ty, $what:literal) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $t {
            type Err = McdError;

            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .into_iter()
                    .find(|x| x.as_str() == s)
                    .ok_or_else(|| McdError::Config(format!(concat!("unknown ", $what, " {:?}"), s)))
            }
        }
    };
}

str_enum!(Fusion, "fusion");
str_enum!(LossTerm, "loss term");

/// One experimental variant of the network.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationMode {
    pub fusion: Fusion,
    pub attention: AttentionMode,
    pub loss_drop: BTreeSet<LossTerm>,
    pub lef_drop: BTreeSet<LefTerm>,
    pub element_fusion: ElementFusion,
    /// Zero every audio and visual input.
    pub question_only: bool,
}

impl AblationMode {
    pub fn is_default(&self) -> bool {
        *self == Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lef_drop.len() == LefTerm::ALL.len() {
            return Err(McdError::Config("cannot drop every element-fusion term".into()));
        }
        Ok(())
    }

    /// Canonical `key=value` list of the non-default fields, or `default`.
    pub fn label(&self) -> String {
        let d = Self::default();
        let join = |items: Vec<&str>| items.join("+");
        let mut parts = Vec::new();
        if self.fusion != d.fusion {
            parts.push(format!("fusion={}", self.fusion));
        }
        if self.attention != d.attention {
            parts.push(format!("attention={}", self.attention));
        }
        if !self.loss_drop.is_empty() {
            parts.push(format!("loss_drop={}", join(self.loss_drop.iter().map(|t| t.as_str()).collect())));
        }
        if !self.lef_drop.is_empty() {
            parts.push(format!("lef_drop={}", join(self.lef_drop.iter().map(|t| t.as_str()).collect())));
        }
        if self.element_fusion != d.element_fusion {
            parts.push(format!("element_fusion={}", self.element_fusion));
        }
        if self.question_only {
            parts.push("question_only=true".into());
        }
        if parts.is_empty() {
            "default".into()
        } else {
            parts.join(",")
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for AblationMode {
    type Err = McdError;

    /// Inverse of [`AblationMode::label`]; set values are `+`-separated.
    fn from_str(s: &str) -> Result<Self> {
        let mut m = Self::default();
        let s = s.trim();
        if s.is_empty() || s == "default" {
            return Ok(m);
        }
        for part in s.split(',') {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| McdError::Config(format!("ablation field {part:?} is not key=value")))?;
            let set_items = || value.split('+').filter(|x| !x.is_empty());
            match key.trim() {
                "fusion" => m.fusion = value.parse()?,
                "attention" => m.attention = value.parse()?,
                "loss_drop" => m.loss_drop = set_items().map(str::parse).collect::<Result<_>>()?,
                "lef_drop" => m.lef_drop = set_items().map(str::parse).collect::<Result<_>>()?,
                "element_fusion" => m.element_fusion = value.parse()?,
                "question_only" => {
                    m.question_only = value
                        .parse()
                        .map_err(|_| McdError::Config(format!("question_only expects true/false, got {value:?}")))?
                }
                other => return Err(McdError::Config(format!("unknown ablation field {other:?}"))),
            }
        }
        m.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Association blocks `N`.
    pub blocks: usize,
    pub heads: usize,
    /// FFN hidden width; twice the feature width when absent.
    pub ffn_hidden: Option<usize>,
    /// Frames sampled per modality for clue scoring, `k`.
    pub frames: usize,
    /// Question tokens beyond this are dropped, `L_q`.
    pub max_question_len: usize,
    /// `Θ` output width; the feature width when absent.
    pub latent_dim: Option<usize>,
    pub dropout: f64,
    /// Mean instead of sum when attaching clues.
    pub attach_mean: bool,
    /// Also run clue selection on the features before the association stack.
    pub early_pass: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub ablation: AblationMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            heads: 1,
            ffn_hidden: None,
            frames: 12,
            max_question_len: 14,
            latent_dim: None,
            dropout: 0.1,
            attach_mean: false,
            early_pass: true,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            ablation: AblationMode::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(McdError::Config(m));
        if self.blocks == 0 {
            return err("need at least one association block".into());
        }
        if self.frames == 0 {
            return err("frames must be positive".into());
        }
        if self.max_question_len == 0 {
            return err("max_question_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return err("batch-norm eps must be positive and momentum in [0, 1]".into());
        }
        self.ablation.validate()
    }
}

/// Sizes taken from the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub dim: usize,
    pub vocab: VocabSizes,
}

impl ModelShape {
    pub fn of(manifest: &DatasetManifest) -> Self {
        Self {
            dim: manifest.dim,
            vocab: manifest.vocab_sizes,
        }
    }
}

/// Rectangular model input built from bundles of equal sequence lengths.
#[derive(Clone, Debug)]
pub struct Batch {
    pub sample_ids: Vec<String>,
    pub type_ids: Vec<usize>,
    /// `[B, L_v, D]`
    pub visual: Tensor,
    /// `[B, L_a, D]`
    pub audio: Tensor,
    pub question: QuestionBatch,
    pub labels: Vec<usize>,
}

fn stack_matrices(mats: &[&FeatureMatrix], what: &str, ids: &[String]) -> Result<Tensor> {
    let (rows, cols) = (mats[0].rows, mats[0].cols);
    let mut data = Vec::with_capacity(mats.len() * rows * cols);
    for (m, id) in mats.iter().zip(ids) {
        if m.rows != rows || m.cols != cols {
            return Err(McdError::Shape(format!(
                "{what} of {id} is {}x{}, batch expects {rows}x{cols}",
                m.rows, m.cols
            )));
        }
        data.extend(m.data.iter().map(|&x| x as f64));
    }
    Ok(Tensor::from_vec([mats.len(), rows, cols], data))
}

impl Batch {
    pub fn from_bundles(bundles: &[&FeatureBundle]) -> Result<Self> {
        if bundles.is_empty() {
            return Err(McdError::Shape("empty batch".into()));
        }
        let sample_ids: Vec<String> = bundles.iter().map(|b| b.sample_id.clone()).collect();
        let visual = stack_matrices(&bundles.iter().map(|b| &b.visual).collect::<Vec<_>>(), "visual", &sample_ids)?;
        let audio = stack_matrices(&bundles.iter().map(|b| &b.audio).collect::<Vec<_>>(), "audio", &sample_ids)?;
        let type_ids: Vec<usize> = bundles.iter().map(|b| b.type_id as usize).collect();
        Ok(Self {
            question: QuestionBatch {
                tokens: bundles
                    .iter()
                    .map(|b| b.question_tokens.iter().map(|&t| t as usize).collect())
                    .collect(),
                type_ids: type_ids.clone(),
                keywords: bundles
                    .iter()
                    .map(|b| b.keyword_ids.iter().map(|&k| k as usize).collect())
                    .collect(),
            },
            type_ids,
            labels: bundles.iter().map(|b| b.answer_id as usize).collect(),
            sample_ids,
            visual,
            audio,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub input_visual: Var,
    pub input_audio: Var,
    /// Association-stack outputs (the inputs when the stack is bypassed).
    pub stack_visual: Var,
    pub stack_audio: Var,
    /// `m_v`, `m_a`
    pub cross_visual: Option<Var>,
    pub cross_audio: Option<Var>,
    pub aggregate: AggregateOutput,
    pub head_input: Var,
    /// `[B, 1, A]`
    pub logits: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Widths on the path into the answer head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WiringInfo {
    /// Width entering the fusion stage (`D`, or `3D` for concat).
    pub fusion_input_width: usize,
    pub head_input_width: usize,
    pub stack_bypassed: bool,
}

#[derive(Clone, Debug)]
pub struct Mcd {
    pub config: ModelConfig,
    pub shape: ModelShape,
    pub store: ParamStore,
    question: QuestionEncoderParams,
    blocks: Vec<BlockParams>,
    clue_visual: AggregatorParams,
    clue_audio: AggregatorParams,
    combine: CombineParams,
    theta: Option<LatentProjector>,
    fusion_refine: Option<Linear>,
    head: PredictionHead,
}

/// Selected frame indices (of the full sequence) for one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inspection {
    pub predictions: Vec<Prediction>,
    pub visual_frames: Vec<Vec<usize>>,
    pub audio_frames: Vec<Vec<usize>>,
}

impl Mcd {
    pub fn new(config: ModelConfig, shape: ModelShape, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = shape.dim;
        if d == 0 {
            return Err(McdError::Config("feature width must be positive".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = Rng::stream(seed, 0);
        let question = QuestionEncoderParams::new(&mut store, &mut rng, d, &shape.vocab, config.max_question_len);
        let wiring = config.ablation.attention.wiring();
        let block_cfg = BlockConfig {
            dim: d,
            ffn_hidden: config.ffn_hidden.unwrap_or(2 * d),
            heads: config.heads,
            bn_eps: config.bn_eps,
            bn_momentum: config.bn_momentum,
        };
        let blocks = if wiring.any() {
            (0..config.blocks)
                .map(|i| BlockParams::new(&mut store, &mut rng, &format!("block{i}"), wiring, &block_cfg))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let clue_visual = AggregatorParams::new(&mut store, &mut rng, "clue.visual", d, config.heads)?;
        let clue_audio = AggregatorParams::new(&mut store, &mut rng, "clue.audio", d, config.heads)?;
        let combine = CombineParams::new(&mut store, &mut rng, d);
        let drops = &config.ablation.loss_drop;
        let theta = (!drops.contains(&LossTerm::DistillV) || !drops.contains(&LossTerm::DistillA))
            .then(|| LatentProjector::new(&mut store, &mut rng, d, config.latent_dim.unwrap_or(d)));
        let fusion_refine = match config.ablation.fusion {
            Fusion::None => None,
            Fusion::Concat => Some(Linear::new(&mut store, &mut rng, "fusion.refine", 3 * d, d, true)),
            Fusion::Add => Some(Linear::new(&mut store, &mut rng, "fusion.refine", d, d, true)),
        };
        let head = PredictionHead::new(&mut store, &mut rng, d, shape.vocab.answer);
        Ok(Self {
            config,
            shape,
            store,
            question,
            blocks,
            clue_visual,
            clue_audio,
            combine,
            theta,
            fusion_refine,
            head,
        })
    }

    pub fn head(&self) -> &PredictionHead {
        &self.head
    }

    pub fn wiring(&self) -> WiringInfo {
        WiringInfo {
            fusion_input_width: self.fusion_refine.as_ref().map_or(self.shape.dim, |l| l.in_dim),
            head_input_width: self.head.input_width(),
            stack_bypassed: self.blocks.is_empty(),
        }
    }

    pub fn forward(&self, fw: &mut Forward, batch: &Batch) -> Result<ForwardOutput> {
        let d = self.shape.dim;
        if batch.visual.cols() != d || batch.audio.cols() != d {
            return Err(McdError::Shape(format!(
                "batch width {}/{} but model expects {d}",
                batch.visual.cols(),
                batch.audio.cols()
            )));
        }
        let ab = &self.config.ablation;
        let (visual, audio) = if ab.question_only {
            (Tensor::zeros(batch.visual.shape()), Tensor::zeros(batch.audio.shape()))
        } else {
            (batch.visual.clone(), batch.audio.clone())
        };
        let input_visual = fw.g.constant(visual);
        let input_audio = fw.g.constant(audio);
        let question = encode_question(&mut fw.g, &self.question, &batch.question)?;

        let (stack_visual, stack_audio, cross_v, cross_a) = if self.blocks.is_empty() {
            (input_visual, input_audio, Vec::new(), Vec::new())
        } else {
            let s = run_association_stack(fw, input_visual, input_audio, &self.blocks)?;
            (s.visual, s.audio, s.visual_cross, s.audio_cross)
        };
        let cross_visual = cross_summary(&mut fw.g, &cross_v);
        let cross_audio = cross_summary(&mut fw.g, &cross_a);

        let train = fw.training();
        let k = self.config.frames;
        let plan = |len: usize, fw: &mut Forward| -> Vec<Vec<usize>> {
            (0..batch.len()).map(|_| sample_frames(len, k, train, fw.rng())).collect()
        };
        let frames_visual = plan(batch.visual.rows(), fw);
        let frames_audio = plan(batch.audio.rows(), fw);

        let agg = aggregate(
            fw,
            &AggregateInputs {
                low_visual: input_visual,
                low_audio: input_audio,
                high_visual: stack_visual,
                high_audio: stack_audio,
                question: &question,
                frames_visual: &frames_visual,
                frames_audio: &frames_audio,
            },
            &AggregateParams {
                visual: &self.clue_visual,
                audio: &self.clue_audio,
                combine: &self.combine,
                lef_drop: &ab.lef_drop,
                element_fusion: ab.element_fusion,
            },
            &AggregateConfig {
                attach_mean: self.config.attach_mean,
                early_pass: self.config.early_pass,
                dropout: self.config.dropout,
            },
        )?;

        let head_input = match (ab.fusion, &self.fusion_refine) {
            (Fusion::None, _) | (_, None) => agg.fused,
            (Fusion::Concat, Some(refine)) => {
                let joined = fw.g.concat(&[agg.fused, agg.summary_visual, agg.summary_audio]);
                let r = refine.forward(&mut fw.g, joined);
                fw.dropout(r, self.config.dropout)
            }
            (Fusion::Add, Some(refine)) => {
                let s = fw.g.add(agg.fused, agg.summary_visual);
                let s = fw.g.add(s, agg.summary_audio);
                let r = refine.forward(&mut fw.g, s);
                fw.dropout(r, self.config.dropout)
            }
        };
        let logits = self.head.logits(&mut fw.g, head_input);
        Ok(ForwardOutput {
            input_visual,
            input_audio,
            stack_visual,
            stack_audio,
            cross_visual,
            cross_audio,
            aggregate: agg,
            head_input,
            logits,
        })
    }

    /// `ℒ = ℒ_answer + ℒ_c^{q̂v} + ℒ_c^{q̂a} + λ_av ℒ_c^{av}` minus dropped terms.
    pub fn loss(&self, fw: &mut Forward, out: &ForwardOutput, labels: &[usize], contrast: &ContrastConfig) -> Result<LossVars> {
        let g = &mut fw.g;
        let drops = &self.config.ablation.loss_drop;
        let answer = cross_entropy(g, out.logits, labels)?;
        let mut total = answer;
        let mut parts = [0.0; 3];
        let fused = out.aggregate.fused;
        let summaries = [out.aggregate.summary_visual, out.aggregate.summary_audio];
        for (i, term) in [LossTerm::DistillV, LossTerm::DistillA].into_iter().enumerate() {
            if drops.contains(&term) {
                continue;
            }
            let theta = self.theta.as_ref().expect("projector exists while a distillation term is active");
            let l = distill_loss(g, theta, fused, summaries[i], contrast)?;
            parts[i] = g.value(l).data()[0];
            total = g.add(total, l);
        }
        if !drops.contains(&LossTerm::Av) {
            if let (Some(mv), Some(ma)) = (out.cross_visual, out.cross_audio) {
                let l = av_contrast_loss(g, mv, ma, contrast)?;
                parts[2] = g.value(l).data()[0];
                let weighted = g.scale(l, contrast.lambda_av);
                total = g.add(total, weighted);
            }
        }
        let breakdown = LossBreakdown::new(g.value(answer).data()[0], parts[0], parts[1], parts[2], contrast.lambda_av);
        Ok(LossVars { total, breakdown })
    }

    /// Eval-mode predictions and high-level clue frames.
    pub fn inspect(&self, batch: &Batch) -> Result<Inspection> {
        let mut fw = Forward::new(&self.store, Mode::Eval, 0);
        let out = self.forward(&mut fw, batch)?;
        let logits = fw.g.value(out.logits);
        let a = logits.cols();
        let predictions = logits.data().chunks(a).map(prediction_from_logits).collect();
        Ok(Inspection {
            predictions,
            visual_frames: out.aggregate.visual.high.selected_frames(),
            audio_frames: out.aggregate.audio.high.selected_frames(),
        })
    }

    pub fn predict_batch(&self, batch: &Batch) -> Result<Vec<Prediction>> {
        Ok(self.inspect(batch)?.predictions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::synthetic::{generate_in_memory, SyntheticSpec};

    fn micro(n: usize) -> (Vec<FeatureBundle>, ModelShape) {
        let spec = SyntheticSpec {
            n_samples: n + 2,
            n_val: 1,
            n_test: 1,
            frames: 4,
            dim: 8,
            n_answer_classes: 4,
            n_keywords: 2,
            noise_sigma: 0.5,
            seed: 3,
        };
        let data = generate_in_memory(&spec).unwrap();
        (data.samples, ModelShape::of(&data.manifest))
    }

    fn cfg(mode: AblationMode) -> ModelConfig {
        ModelConfig {
            blocks: 1,
            frames: 4,
            ablation: mode,
            ..ModelConfig::default()
        }
    }

    fn batch_of(samples: &[FeatureBundle], n: usize) -> Batch {
        Batch::from_bundles(&samples.iter().take(n).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn ablation_labels_roundtrip() {
        let modes = [
            "default",
            "fusion=concat",
            "attention=self_a,loss_drop=distill_v+av",
            "lef_drop=F_v+text_object,element_fusion=add_only",
            "question_only=true",
        ];
        for m in modes {
            let parsed: AblationMode = m.parse().unwrap();
            assert_eq!(parsed.label(), m);
        }
        assert!("fusion=late".parse::<AblationMode>().is_err());
        assert!("colour=red".parse::<AblationMode>().is_err());
        assert!("lef_drop=F_v+F_a+text_object".parse::<AblationMode>().is_err());
    }

    #[test]
    fn default_mode_matches_documented_defaults() {
        let m = AblationMode::default();
        assert_eq!(m.fusion, Fusion::None);
        assert_eq!(m.attention, AttentionMode::BidirFull);
        assert!(m.loss_drop.is_empty() && m.lef_drop.is_empty());
        assert_eq!(m.element_fusion, ElementFusion::AddDot);
        assert_eq!(ModelConfig::default().blocks, 2);
    }

    #[test]
    fn fusion_widths() {
        let (_, shape) = micro(3);
        for (f, width) in [(Fusion::None, 8), (Fusion::Concat, 24), (Fusion::Add, 8)] {
            let m = Mcd::new(cfg(AblationMode { fusion: f, ..Default::default() }), shape, 1).unwrap();
            let w = m.wiring();
            assert_eq!(w.fusion_input_width, width, "{f}");
            assert_eq!(w.head_input_width, 8);
        }
    }

    #[test]
    fn head_reads_only_the_question_embedding() {
        let (samples, shape) = micro(3);
        let model = Mcd::new(cfg(AblationMode::default()), shape, 2).unwrap();
        let batch = batch_of(&samples, 3);
        let mut fw = Forward::new(&model.store, Mode::Eval, 0);
        let out = model.forward(&mut fw, &batch).unwrap();
        assert_eq!(out.head_input, out.aggregate.fused);
        let fused = fw.g.value(out.aggregate.fused).clone();
        let logits = fw.g.value(out.logits).clone();
        let mut g = crate::autograd::Graph::new(&model.store);
        let x = g.constant(fused);
        let again = model.head().logits(&mut g, x);
        assert_eq!(g.value(again), &logits);
    }

    #[test]
    fn attention_off_bypasses_the_stack() {
        let (samples, shape) = micro(3);
        let model = Mcd::new(cfg(AblationMode { attention: AttentionMode::Off, ..Default::default() }), shape, 2).unwrap();
        assert!(model.wiring().stack_bypassed);
        let batch = batch_of(&samples, 3);
        let mut fw = Forward::new(&model.store, Mode::Train, 0);
        let out = model.forward(&mut fw, &batch).unwrap();
        assert_eq!(fw.g.value(out.stack_visual), &batch.visual);
        assert_eq!(fw.g.value(out.stack_audio), &batch.audio);
        let l = model.loss(&mut fw, &out, &batch.labels, &ContrastConfig::default()).unwrap();
        assert_eq!(l.breakdown.av, 0.0);
    }

    #[test]
    fn question_only_ignores_features() {
        let (samples, shape) = micro(4);
        let model = Mcd::new(cfg(AblationMode { question_only: true, ..Default::default() }), shape, 2).unwrap();
        let a = batch_of(&samples, 2);
        let mut b = a.clone();
        b.visual = b.visual.map(|x| x * 3.0 + 1.0);
        b.audio = b.audio.map(|x| -x);
        assert_eq!(model.predict_batch(&a).unwrap(), model.predict_batch(&b).unwrap());
    }

    #[test]
    fn loss_total_matches_components() {
        let (samples, shape) = micro(3);
        let model = Mcd::new(cfg(AblationMode::default()), shape, 4).unwrap();
        let batch = batch_of(&samples, 3);
        let mut fw = Forward::new(&model.store, Mode::Train, 9);
        let out = model.forward(&mut fw, &batch).unwrap();
        let c = ContrastConfig::default();
        let l = model.loss(&mut fw, &out, &batch.labels, &c).unwrap();
        let b = l.breakdown;
        assert!(b.distill_v > 0.0 && b.distill_a > 0.0 && b.av > 0.0);
        assert!((fw.g.value(l.total).data()[0] - b.total).abs() < 1e-12);

        let dropped = Mcd::new(
            cfg("loss_drop=distill_v+distill_a+av".parse().unwrap()),
            shape,
            4,
        )
        .unwrap();
        let mut fw = Forward::new(&dropped.store, Mode::Train, 9);
        let out = dropped.forward(&mut fw, &batch).unwrap();
        let l = dropped.loss(&mut fw, &out, &batch.labels, &c).unwrap();
        assert_eq!(l.breakdown.total, l.breakdown.answer);
    }

    #[test]
    fn ragged_batches_are_rejected() {
        let (mut samples, _) = micro(2);
        samples[1].visual = FeatureMatrix::new(3, 8, vec![0.0; 24]);
        let refs: Vec<_> = samples.iter().take(2).collect();
        let err = Batch::from_bundles(&refs).unwrap_err().to_string();
        assert!(err.contains("visual"), "{err}");
    }

    #[test]
    fn clue_frames_are_within_sequence() {
        let (samples, shape) = micro(3);
        let model = Mcd::new(cfg(AblationMode::default()), shape, 5).unwrap();
        let ins = model.inspect(&batch_of(&samples, 3)).unwrap();
        for f in ins.visual_frames.iter().chain(&ins.audio_frames) {
            assert_eq!(f.len(), 2);
            assert!(f.iter().all(|&i| i < 4));
        }
    }
}
