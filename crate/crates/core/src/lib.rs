//! Mutual correlation distillation (MCD) for audio-visual question answering
//! over pre-extracted feature sequences.
//!
//! The model writes key audio-visual clues into the question embedding and
//! predicts answers from that embedding alone. Components:
//!
//! * [`feature_store`]: dataset files, manifests and planted-clue data;
//! * [`attention_core`]: association blocks (self attention plus a
//!   cross-modal channel gate, FFN and batch norm in residual form);
//! * [`clue_aggregator`]: question enrichment, scene descriptions, Top-k
//!   clue selection and the combinatorial question embedding;
//! * [`semantic_approx`]: InfoNCE distillation and audio-visual contrast;
//! * [`trainer`]: prediction head, objective, Adam, checkpoints, evaluation
//!   and the finite-difference gradient check;
//! * [`harness`]: ablation grids, curves and clue recovery.

pub mod attention_core;
pub mod autograd;
pub mod backend;
pub mod clue_aggregator;
pub mod error;
pub mod feature_store;
pub mod harness;
pub mod json;
pub mod layers;
pub mod model;
pub mod params;
pub mod rng;
pub mod semantic_approx;
pub mod tensor;
pub mod trainer;

pub use error::{McdError, Result};
pub use tensor::Tensor;
