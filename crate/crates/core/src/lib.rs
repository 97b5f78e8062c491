//! Desk-scale permutation language modeling.
//!
//! A from-scratch stack: dense f64 tensors with reverse-mode autodiff,
//! factorization-order sampling and attention-mask construction, two-stream
//! relative-attention layers with segment recurrence, three pretraining
//! objectives (permutation LM, denoising, autoregressive), an AdamW trainer
//! with a linear warmup/decay schedule, and a combinatorial
//! dependency-coverage analyzer.

pub mod attention;
pub mod checkpoint;
pub mod corpus;
pub mod coverage;
pub mod gradcheck;
pub mod graph;
pub mod mask;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use graph::{Graph, NodeId};
pub use mask::{AttentionMaskPair, Permutation, TargetSelection};
pub use model::{ModelConfig, ModelParams};
pub use rng::Rng;
pub use tensor::{BoolMat, Tensor, TensorError};
