use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, Role};

/// Closed-form parameter counts for one stack.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackCounts {
    pub layers: usize,
    /// Patch projection (encoder) or token table (decoder), plus positions.
    pub embeddings: usize,
    /// Token table alone; zero for encoders.
    pub token_embeddings: usize,
    /// Class and distillation tokens.
    pub special_tokens: usize,
    pub attention_per_layer: usize,
    pub cross_attention_per_layer: usize,
    pub mlp_per_layer: usize,
    pub layer_norms: usize,
    /// Encoder-to-decoder width projection.
    pub projection: usize,
    /// LM head or distillation head.
    pub heads: usize,
    pub total: usize,
}

impl StackCounts {
    fn finish(mut self) -> Self {
        self.total = self.embeddings
            + self.special_tokens
            + self.layers * (self.attention_per_layer + self.cross_attention_per_layer + self.mlp_per_layer)
            + self.layer_norms
            + self.projection
            + self.heads;
        self
    }

    pub fn total_without_token_embeddings(&self) -> usize {
        self.total - self.token_embeddings
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub encoder: StackCounts,
    pub decoder: StackCounts,
    pub total: usize,
}

impl ParamBreakdown {
    pub fn total_without_token_embeddings(&self) -> usize {
        self.total - self.decoder.token_embeddings
    }
}

fn attention(d: usize) -> usize {
    4 * d * d + 4 * d
}

fn mlp(d: usize, hidden: usize) -> usize {
    2 * d * hidden + hidden + d
}

/// Vision stack: patch projection, class (and distillation) token,
/// positions, `L` pre-norm blocks, final norm and optional distillation head.
pub fn count_encoder(cfg: &ModelConfig) -> StackCounts {
    let d = cfg.embed_dim;
    let patch_in = cfg.patch_size * cfg.patch_size * cfg.channels;
    let side = cfg.image_size / cfg.patch_size;
    let tokens = side * side + 1 + usize::from(cfg.use_distillation_token);
    StackCounts {
        layers: cfg.num_layers,
        embeddings: patch_in * d + d + tokens * d,
        token_embeddings: 0,
        special_tokens: d * (1 + usize::from(cfg.use_distillation_token)),
        attention_per_layer: attention(d),
        cross_attention_per_layer: 0,
        mlp_per_layer: mlp(d, cfg.mlp_hidden),
        layer_norms: (2 * cfg.num_layers + 1) * 2 * d,
        projection: 0,
        heads: if cfg.distill_classes > 0 { d * cfg.distill_classes + cfg.distill_classes } else { 0 },
        total: 0,
    }
    .finish()
}

/// Text stack reading memory of width `memory_dim`: token table, positions,
/// optional memory projection, `L` blocks with self- and cross-attention,
/// final norm and LM head (weight omitted when tied).
pub fn count_decoder(cfg: &ModelConfig, memory_dim: usize) -> StackCounts {
    let d = cfg.embed_dim;
    let v = cfg.vocab_size;
    StackCounts {
        layers: cfg.num_layers,
        embeddings: v * d + cfg.max_text_len * d,
        token_embeddings: v * d,
        special_tokens: 0,
        attention_per_layer: attention(d),
        cross_attention_per_layer: attention(d),
        mlp_per_layer: mlp(d, cfg.mlp_hidden),
        layer_norms: (3 * cfg.num_layers + 1) * 2 * d,
        projection: if memory_dim != d { memory_dim * d + d } else { 0 },
        heads: if cfg.tie_word_embeddings { v } else { d * v + v },
        total: 0,
    }
    .finish()
}

/// Parameter breakdown of an encoder/decoder pair.
pub fn count_parameters(enc: &ModelConfig, dec: &ModelConfig) -> ParamBreakdown {
    debug_assert!(enc.role == Role::Encoder && dec.role == Role::Decoder);
    let encoder = count_encoder(enc);
    let decoder = count_decoder(dec, enc.embed_dim);
    ParamBreakdown { encoder, decoder, total: encoder.total + decoder.total }
}
