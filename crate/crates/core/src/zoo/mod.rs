//! Named configurations, closed-form parameter accounting and checkpoints.

mod count;
mod presets;
mod weights;

pub use count::{count_decoder, count_encoder, count_parameters, ParamBreakdown, StackCounts};
pub use presets::{
    preset, PresetName, DISTILL_HEAD_CLASSES, FULL_MAX_TEXT_LEN, FULL_VOCAB, TOY_MAX_TEXT_LEN,
};
pub use weights::{
    decode_checkpoint, encode_checkpoint, header_size, load_weights, save_weights, Checkpoint, DTYPE_F32, MAGIC,
    VERSION,
};

/// Published reference counts.
pub mod reference {
    /// Combined encoder-decoder totals.
    pub const DEIT_BERT: usize = 224_270_394;
    pub const VIT_BERT: usize = 224_270_394;
    pub const DISTILLED_DEIT_TINY_TINYBERT: usize = 21_568_458;
    pub const DEIT_TINY_TINYBERT: usize = 21_568_074;
    /// Single-model magnitudes.
    pub const DEIT_BASE: usize = 86_000_000;
    pub const VIT_BASE: usize = 86_000_000;
    pub const DEIT_TINY: usize = 5_000_000;
    pub const DEIT_TINY_DISTILLED: usize = 6_000_000;
    pub const BERT_BASE: usize = 86_000_000;
    pub const TINYBERT: usize = 14_000_000;
    pub const TRANSFORMER_TINY: usize = 4_000_000;
}

use presets::PresetName as P;

/// Published combined total for a preset pair, when there is one.
pub fn reference_pair_total(enc: PresetName, dec: PresetName) -> Option<usize> {
    match (enc, dec) {
        (P::DeitBase, P::BertBaseDec) => Some(reference::DEIT_BERT),
        (P::VitBase, P::BertBaseDec) => Some(reference::VIT_BERT),
        (P::DeitTinyDistilled, P::TinybertDec) => Some(reference::DISTILLED_DEIT_TINY_TINYBERT),
        (P::DeitTiny, P::TinybertDec) => Some(reference::DEIT_TINY_TINYBERT),
        _ => None,
    }
}

/// Published single-model magnitude for a full-size preset.
pub fn reference_single(name: PresetName) -> Option<usize> {
    match name {
        P::DeitBase => Some(reference::DEIT_BASE),
        P::VitBase => Some(reference::VIT_BASE),
        P::DeitTiny => Some(reference::DEIT_TINY),
        P::DeitTinyDistilled => Some(reference::DEIT_TINY_DISTILLED),
        P::BertBaseDec => Some(reference::BERT_BASE),
        P::TinybertDec => Some(reference::TINYBERT),
        P::TransformerTinyDec => Some(reference::TRANSFORMER_TINY),
        _ => None,
    }
}

/// Signed deviation `(ours - reference) / reference`.
pub fn deviation(ours: usize, reference: usize) -> f64 {
    (ours as f64 - reference as f64) / reference as f64
}
