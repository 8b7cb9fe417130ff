use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Which half of the encoder-decoder a config describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Encoder,
    Decoder,
}

/// Architecture hyperparameters for one stack.
///
/// Encoder configs ignore the text fields (`vocab_size`, `max_text_len`,
/// `tie_word_embeddings`); decoder configs ignore the image fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub role: Role,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Feed-forward hidden width, `mlp_ratio · embed_dim`.
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub use_distillation_token: bool,
    /// Output width of the distillation-token head; 0 means no head.
    #[serde(default)]
    pub distill_classes: usize,
    /// Reuse the token embedding matrix as the LM head weight.
    #[serde(default)]
    pub tie_word_embeddings: bool,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

fn default_eps() -> f64 {
    1e-12
}

impl ModelConfig {
    /// A vision encoder with the usual 4x MLP ratio.
    pub fn encoder(embed_dim: usize, num_layers: usize, num_heads: usize, image_size: usize, patch_size: usize) -> Self {
        ModelConfig {
            role: Role::Encoder,
            embed_dim,
            num_layers,
            num_heads,
            mlp_hidden: 4 * embed_dim,
            vocab_size: 0,
            max_text_len: 0,
            image_size,
            patch_size,
            channels: 3,
            use_distillation_token: false,
            distill_classes: 0,
            tie_word_embeddings: false,
            layer_norm_eps: default_eps(),
        }
    }

    /// A text decoder with the usual 4x MLP ratio.
    pub fn decoder(embed_dim: usize, num_layers: usize, num_heads: usize, vocab_size: usize, max_text_len: usize) -> Self {
        ModelConfig {
            role: Role::Decoder,
            embed_dim,
            num_layers,
            num_heads,
            mlp_hidden: 4 * embed_dim,
            vocab_size,
            max_text_len,
            image_size: 0,
            patch_size: 0,
            channels: 0,
            use_distillation_token: false,
            distill_classes: 0,
            tie_word_embeddings: false,
            layer_norm_eps: default_eps(),
        }
    }

    pub fn mlp_ratio(&self) -> f64 {
        self.mlp_hidden as f64 / self.embed_dim as f64
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Encoder sequence length: patches plus class token, plus the
    /// distillation token when enabled.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1 + usize::from(self.use_distillation_token)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_layers == 0 || self.num_heads == 0 || self.mlp_hidden == 0 {
            return Err(invalid(format!("dimensions must be positive: {self:?}")));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(invalid(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(invalid("layer_norm_eps must be positive"));
        }
        match self.role {
            Role::Encoder => {
                if self.image_size == 0 || self.patch_size == 0 || self.channels == 0 {
                    return Err(invalid("encoder needs positive image_size, patch_size and channels"));
                }
                if !self.image_size.is_multiple_of(self.patch_size) {
                    return Err(invalid(format!(
                        "image_size {} is not a multiple of patch_size {}",
                        self.image_size, self.patch_size
                    )));
                }
                if self.distill_classes > 0 && !self.use_distillation_token {
                    return Err(invalid("distill_classes set without a distillation token"));
                }
            }
            Role::Decoder => {
                if self.vocab_size == 0 || self.max_text_len == 0 {
                    return Err(invalid("decoder needs positive vocab_size and max_text_len"));
                }
                if self.use_distillation_token {
                    return Err(invalid("the distillation token belongs to the encoder"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        let mut cfg = ModelConfig::encoder(16, 1, 3, 32, 8);
        assert!(cfg.validate().is_err());
        cfg.num_heads = 4;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn rejects_ragged_patches() {
        assert!(ModelConfig::encoder(16, 1, 2, 30, 8).validate().is_err());
    }

    #[test]
    fn token_count_includes_special_tokens() {
        let mut cfg = ModelConfig::encoder(16, 1, 2, 32, 8);
        assert_eq!(cfg.num_tokens(), 17);
        cfg.use_distillation_token = true;
        assert_eq!(cfg.num_tokens(), 18);
    }
}
