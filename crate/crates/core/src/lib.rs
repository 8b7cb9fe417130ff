//! Transformer image captioning on a small f64 autodiff core.
//!
//! A ViT-style encoder feeds a causal text decoder through cross-attention.
//! Around the model sit teacher-to-student distillation, ROUGE/BLEU
//! scoring, a synthetic shapes dataset, presets with closed-form parameter
//! counts, a binary weight format and a latency/memory benchmark.

pub mod bench;
pub mod cli;
pub mod data;
pub mod distill;
pub mod error;
pub mod generation;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
pub mod vocab;
pub mod zoo;

pub use error::{Error, Result};
pub use model::{EncoderDecoderModel, Memory, ModelConfig};
pub use tensor::{Tape, Tensor, Var};
pub use vocab::Vocabulary;
