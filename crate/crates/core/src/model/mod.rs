//! Vision encoder and text decoder joined by cross-attention.
//!
//! Both stacks are pre-norm: every sublayer reads `LayerNorm(h)` and adds its
//! output back onto `h`. Encoder layers carry one unmasked self-attention
//! block; decoder layers carry a causal self-attention block followed by a
//! cross-attention block whose keys and values come from the encoder memory.

mod attention;
mod config;
mod params;
mod patch;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use attention::{multi_head_attention, AttentionOutput, AttentionParams};
pub use config::{ModelConfig, Role};
pub use params::{Bindings, ParamStore, INIT_STD};
pub use patch::{patchify, unpatchify};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::vocab::{BOS, EOS, PAD};
use attention::{causal_keep_mask, linear};
use params::Init;

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    Normal,
    Zeros,
    Ones,
}

/// One entry of a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
}

fn spec(name: String, shape: Vec<usize>, init: InitKind) -> ParamSpec {
    ParamSpec { name, shape, init }
}

fn push_linear(out: &mut Vec<ParamSpec>, prefix: &str, d_in: usize, d_out: usize) {
    out.push(spec(format!("{prefix}.weight"), vec![d_in, d_out], InitKind::Normal));
    out.push(spec(format!("{prefix}.bias"), vec![d_out], InitKind::Zeros));
}

fn push_norm(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push(spec(format!("{prefix}.weight"), vec![d], InitKind::Ones));
    out.push(spec(format!("{prefix}.bias"), vec![d], InitKind::Zeros));
}

fn push_attention(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        push_linear(out, &format!("{prefix}.{p}_proj"), d, d);
    }
}

fn push_mlp(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, hidden: usize) {
    push_linear(out, &format!("{prefix}.fc1"), d, hidden);
    push_linear(out, &format!("{prefix}.fc2"), hidden, d);
}

/// Parameter layout of an encoder/decoder pair, in initialization order.
pub fn parameter_layout(enc: &ModelConfig, dec: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let d = enc.embed_dim;
    push_linear(&mut out, "encoder.patch_embed", enc.patch_len(), d);
    out.push(spec("encoder.cls_token".into(), vec![1, d], InitKind::Normal));
    if enc.use_distillation_token {
        out.push(spec("encoder.dist_token".into(), vec![1, d], InitKind::Normal));
    }
    out.push(spec("encoder.pos_embed".into(), vec![enc.num_tokens(), d], InitKind::Normal));
    for i in 0..enc.num_layers {
        let p = format!("encoder.layer.{i}");
        push_norm(&mut out, &format!("{p}.ln1"), d);
        push_attention(&mut out, &format!("{p}.attn"), d);
        push_norm(&mut out, &format!("{p}.ln2"), d);
        push_mlp(&mut out, &format!("{p}.mlp"), d, enc.mlp_hidden);
    }
    push_norm(&mut out, "encoder.ln_f", d);
    if enc.distill_classes > 0 {
        push_linear(&mut out, "encoder.dist_head", d, enc.distill_classes);
    }

    let d = dec.embed_dim;
    out.push(spec("decoder.token_embed".into(), vec![dec.vocab_size, d], InitKind::Normal));
    out.push(spec("decoder.pos_embed".into(), vec![dec.max_text_len, d], InitKind::Normal));
    if enc.embed_dim != d {
        push_linear(&mut out, "decoder.memory_proj", enc.embed_dim, d);
    }
    for i in 0..dec.num_layers {
        let p = format!("decoder.layer.{i}");
        push_norm(&mut out, &format!("{p}.ln1"), d);
        push_attention(&mut out, &format!("{p}.self_attn"), d);
        push_norm(&mut out, &format!("{p}.ln2"), d);
        push_attention(&mut out, &format!("{p}.cross_attn"), d);
        push_norm(&mut out, &format!("{p}.ln3"), d);
        push_mlp(&mut out, &format!("{p}.mlp"), d, dec.mlp_hidden);
    }
    push_norm(&mut out, "decoder.ln_f", d);
    if !dec.tie_word_embeddings {
        out.push(spec("decoder.lm_head.weight".into(), vec![d, dec.vocab_size], InitKind::Normal));
    }
    out.push(spec("decoder.lm_head.bias".into(), vec![dec.vocab_size], InitKind::Zeros));
    out
}

/// Encoder output for one image.
#[derive(Clone, Debug)]
pub struct Memory {
    /// `[num_tokens, d_enc]`
    pub states: Tensor,
    pub source_config: ModelConfig,
}

/// Intermediate decoder values captured for layer-wise distillation.
#[derive(Clone, Debug, Default)]
pub struct DecoderTrace {
    /// Token plus position embedding, `[B, T, d]`.
    pub embedding: Option<Var>,
    /// Output of each layer, `[B, T, d]`.
    pub hidden: Vec<Var>,
    /// Self-attention scores of each layer, `[B·h, T, T]`, pre-softmax with
    /// the masked future half set to zero.
    pub scores: Vec<Var>,
}

/// Teacher-forced training batch.
#[derive(Clone, Debug)]
pub struct CaptionBatch {
    pub images: Vec<Tensor>,
    /// Decoder inputs, `batch × len`, row-major.
    pub inputs: Vec<usize>,
    /// Next-token targets aligned with `inputs`; PAD marks ignored slots.
    pub targets: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

impl CaptionBatch {
    /// Pads captions to a common length. Each caption must start with BOS
    /// and end with EOS.
    pub fn new(images: Vec<Tensor>, captions: &[Vec<usize>]) -> Result<Self> {
        if images.is_empty() || images.len() != captions.len() {
            return Err(invalid(format!("{} images for {} captions", images.len(), captions.len())));
        }
        for (i, c) in captions.iter().enumerate() {
            if c.len() < 2 || c[0] != BOS || *c.last().unwrap() != EOS {
                return Err(invalid(format!("caption {i} must start with BOS and end with EOS: {c:?}")));
            }
        }
        let len = captions.iter().map(|c| c.len() - 1).max().unwrap();
        let batch = captions.len();
        let mut inputs = vec![PAD; batch * len];
        let mut targets = vec![PAD; batch * len];
        for (b, c) in captions.iter().enumerate() {
            for t in 0..c.len() - 1 {
                inputs[b * len + t] = c[t];
                targets[b * len + t] = c[t + 1];
            }
        }
        Ok(CaptionBatch { images, inputs, targets, batch, len })
    }
}

/// A trainable encoder-decoder captioning model.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderDecoderModel {
    encoder_cfg: ModelConfig,
    decoder_cfg: ModelConfig,
    params: ParamStore,
}

fn check_roles(enc: &ModelConfig, dec: &ModelConfig) -> Result<()> {
    if enc.role != Role::Encoder || dec.role != Role::Decoder {
        return Err(invalid("expected an encoder config followed by a decoder config"));
    }
    enc.validate()?;
    dec.validate()
}

impl EncoderDecoderModel {
    /// Randomly initialized model; identical seeds give identical weights.
    pub fn new(encoder_cfg: ModelConfig, decoder_cfg: ModelConfig, seed: u64) -> Result<Self> {
        check_roles(&encoder_cfg, &decoder_cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut params = ParamStore::new();
        for p in parameter_layout(&encoder_cfg, &decoder_cfg) {
            let t = match p.init {
                InitKind::Normal => init.normal(p.shape),
                InitKind::Zeros => init.zeros(p.shape),
                InitKind::Ones => init.ones(p.shape),
            };
            params.insert(p.name, t);
        }
        Ok(EncoderDecoderModel { encoder_cfg, decoder_cfg, params })
    }

    /// Assembles a model from existing tensors, checking names and shapes
    /// against the layout implied by the configs.
    pub fn from_params(encoder_cfg: ModelConfig, decoder_cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        check_roles(&encoder_cfg, &decoder_cfg)?;
        let layout = parameter_layout(&encoder_cfg, &decoder_cfg);
        if layout.len() != params.len() {
            return Err(invalid(format!("config expects {} tensors, found {}", layout.len(), params.len())));
        }
        for p in &layout {
            let t = params.get(&p.name).ok_or_else(|| invalid(format!("missing tensor {}", p.name)))?;
            if t.shape() != p.shape.as_slice() {
                return Err(invalid(format!("tensor {} has shape {:?}, config implies {:?}", p.name, t.shape(), p.shape)));
            }
        }
        Ok(EncoderDecoderModel { encoder_cfg, decoder_cfg, params })
    }

    pub fn encoder_config(&self) -> &ModelConfig {
        &self.encoder_cfg
    }

    pub fn decoder_config(&self) -> &ModelConfig {
        &self.decoder_cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Number of scalars in the parameter map.
    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        self.params.bind(tape)
    }

    /// Stops gradients for every parameter.
    pub fn freeze(&mut self) {
        self.params.set_trainable(|_| false);
    }

    /// Leaves only the last `k` layers of each stack trainable, plus the
    /// final norms, output heads and the memory projection. Embeddings and
    /// earlier layers are frozen.
    pub fn freeze_all_but_last(&mut self, k: usize) {
        let enc_keep = self.encoder_cfg.num_layers.saturating_sub(k);
        let dec_keep = self.decoder_cfg.num_layers.saturating_sub(k);
        self.params.set_trainable(|name| {
            if let Some(i) = layer_index(name, "encoder.layer.") {
                return i >= enc_keep;
            }
            if let Some(i) = layer_index(name, "decoder.layer.") {
                return i >= dec_keep;
            }
            !(name.ends_with("_embed") || name.ends_with("_token") || name.starts_with("encoder.patch_embed"))
        });
    }

    pub fn unfreeze(&mut self) {
        self.params.set_trainable(|_| true);
    }

    /// Encoder forward for a batch of images; returns states `[B, n, d_enc]`.
    pub fn encode_batch(&self, tape: &mut Tape, b: &Bindings, images: &[&Tensor]) -> Result<Var> {
        let cfg = &self.encoder_cfg;
        if images.is_empty() {
            return Err(shape_err("empty image batch"));
        }
        let np = cfg.num_patches();
        let plen = cfg.patch_len();
        let mut flat = Vec::with_capacity(images.len() * np * plen);
        for img in images {
            flat.extend_from_slice(patchify(img, cfg)?.data());
        }
        let batch = images.len();
        let patches = tape.constant(Tensor::new(vec![batch, np, plen], flat)?);
        let x = linear(tape, patches, b.var("encoder.patch_embed.weight")?, b.var("encoder.patch_embed.bias")?)?;
        let cls = tape.repeat_batch(b.var("encoder.cls_token")?, batch)?;
        let mut parts = vec![cls];
        if cfg.use_distillation_token {
            parts.push(tape.repeat_batch(b.var("encoder.dist_token")?, batch)?);
        }
        parts.push(x);
        let seq = tape.concat(&parts, 1)?;
        let mut h = tape.add_broadcast(seq, b.var("encoder.pos_embed")?)?;
        for i in 0..cfg.num_layers {
            let p = format!("encoder.layer.{i}");
            let n1 = norm(tape, b, &format!("{p}.ln1"), h, cfg.layer_norm_eps)?;
            let attn = AttentionParams::bound(b, &format!("{p}.attn"))?;
            let a = multi_head_attention(tape, n1, n1, &attn, cfg.num_heads, false)?;
            h = tape.add(h, a.output)?;
            let n2 = norm(tape, b, &format!("{p}.ln2"), h, cfg.layer_norm_eps)?;
            let m = mlp(tape, b, &format!("{p}.mlp"), n2)?;
            h = tape.add(h, m)?;
        }
        norm(tape, b, "encoder.ln_f", h, cfg.layer_norm_eps)
    }

    /// Runs the encoder on one image.
    pub fn encode(&self, image: &Tensor) -> Result<Memory> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let states = self.encode_batch(&mut tape, &b, &[image])?;
        let s = tape.value(states);
        let states = s.reshape(s.shape()[1..].to_vec())?;
        Ok(Memory { states, source_config: self.encoder_cfg.clone() })
    }

    /// Distillation-head logits `[B, classes]` read from the distillation
    /// token's output state.
    pub fn distill_logits(&self, tape: &mut Tape, b: &Bindings, states: Var) -> Result<Var> {
        let cfg = &self.encoder_cfg;
        if !cfg.use_distillation_token || cfg.distill_classes == 0 {
            return Err(Error::Usage("encoder has no distillation token head".into()));
        }
        let batch = tape.shape(states)[0];
        let tok = tape.narrow(states, 1, 1, 1)?;
        let tok = tape.reshape(tok, &[batch, cfg.embed_dim])?;
        linear(tape, tok, b.var("encoder.dist_head.weight")?, b.var("encoder.dist_head.bias")?)
    }

    /// Teacher-forced decoder over `tokens` (`batch × len`, row-major)
    /// against encoder states `[B, n, d_enc]`; returns logits `[B, len, V]`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_batch(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        memory: Var,
        tokens: &[usize],
        batch: usize,
        len: usize,
        mut trace: Option<&mut DecoderTrace>,
    ) -> Result<Var> {
        let cfg = &self.decoder_cfg;
        if len == 0 || len > cfg.max_text_len {
            return Err(invalid(format!("sequence length {len} outside 1..={}", cfg.max_text_len)));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(invalid(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        let ms = tape.shape(memory).to_vec();
        if ms.len() != 3 || ms[0] != batch || ms[2] != self.encoder_cfg.embed_dim {
            return Err(shape_err(format!("memory shape {ms:?} does not fit batch {batch}")));
        }
        let mem = if cfg.embed_dim != self.encoder_cfg.embed_dim {
            linear(tape, memory, b.var("decoder.memory_proj.weight")?, b.var("decoder.memory_proj.bias")?)?
        } else {
            memory
        };
        let emb = tape.embedding(b.var("decoder.token_embed")?, tokens, &[batch, len])?;
        let pos = tape.narrow(b.var("decoder.pos_embed")?, 0, 0, len)?;
        let mut h = tape.add_broadcast(emb, pos)?;
        let keep = match trace {
            Some(ref mut t) => {
                t.embedding = Some(h);
                let mut full = Vec::with_capacity(batch * cfg.num_heads * len * len);
                let m = causal_keep_mask(len);
                for _ in 0..batch * cfg.num_heads {
                    full.extend_from_slice(m.data());
                }
                Some(tape.constant(Tensor::new(vec![batch * cfg.num_heads, len, len], full)?))
            }
            None => None,
        };
        for i in 0..cfg.num_layers {
            let p = format!("decoder.layer.{i}");
            let n1 = norm(tape, b, &format!("{p}.ln1"), h, cfg.layer_norm_eps)?;
            let sa = AttentionParams::bound(b, &format!("{p}.self_attn"))?;
            let a = multi_head_attention(tape, n1, n1, &sa, cfg.num_heads, true)?;
            h = tape.add(h, a.output)?;
            let n2 = norm(tape, b, &format!("{p}.ln2"), h, cfg.layer_norm_eps)?;
            let ca = AttentionParams::bound(b, &format!("{p}.cross_attn"))?;
            let c = multi_head_attention(tape, n2, mem, &ca, cfg.num_heads, false)?;
            h = tape.add(h, c.output)?;
            let n3 = norm(tape, b, &format!("{p}.ln3"), h, cfg.layer_norm_eps)?;
            let m = mlp(tape, b, &format!("{p}.mlp"), n3)?;
            h = tape.add(h, m)?;
            if let (Some(t), Some(keep)) = (trace.as_deref_mut(), keep) {
                t.scores.push(tape.mul(a.scores, keep)?);
                t.hidden.push(h);
            }
        }
        let h = norm(tape, b, "decoder.ln_f", h, cfg.layer_norm_eps)?;
        let head = if cfg.tie_word_embeddings {
            let e = b.var("decoder.token_embed")?;
            tape.transpose(e)?
        } else {
            b.var("decoder.lm_head.weight")?
        };
        let logits = tape.matmul(h, head)?;
        tape.add_broadcast(logits, b.var("decoder.lm_head.bias")?)
    }

    /// Logits `[len, V]` at every position of `prefix` given one image's memory.
    pub fn decode_sequence(&self, prefix: &[usize], memory: &Memory) -> Result<Tensor> {
        if prefix.is_empty() {
            return Err(invalid("decode needs a non-empty prefix"));
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let ms = memory.states.shape();
        let mem = tape.constant(memory.states.reshape(vec![1, ms[0], ms[1]])?);
        let logits = self.decode_batch(&mut tape, &b, mem, prefix, 1, prefix.len(), None)?;
        tape.value(logits).reshape(vec![prefix.len(), self.decoder_cfg.vocab_size])
    }

    /// Next-token logits `[V]` after `prefix`.
    pub fn decode_step(&self, prefix: &[usize], memory: &Memory) -> Result<Tensor> {
        let all = self.decode_sequence(prefix, memory)?;
        let v = self.decoder_cfg.vocab_size;
        let last = &all.data()[(prefix.len() - 1) * v..];
        Tensor::new(vec![v], last.to_vec())
    }

    /// Teacher-forced logits `[B, T, V]` for a batch.
    pub fn batch_logits(&self, tape: &mut Tape, b: &Bindings, batch: &CaptionBatch, trace: Option<&mut DecoderTrace>) -> Result<Var> {
        let imgs: Vec<&Tensor> = batch.images.iter().collect();
        let memory = self.encode_batch(tape, b, &imgs)?;
        self.decode_batch(tape, b, memory, &batch.inputs, batch.batch, batch.len, trace)
    }

    /// Mean next-token cross-entropy over non-PAD targets.
    pub fn training_loss(&self, tape: &mut Tape, b: &Bindings, batch: &CaptionBatch) -> Result<Var> {
        let logits = self.batch_logits(tape, b, batch, None)?;
        tape.cross_entropy(logits, &batch.targets, PAD)
    }

    /// Builds a tape holding the training loss for `(images, captions)`.
    /// Call `backward` on the returned tape, then [`ParamStore::absorb_grads`].
    pub fn forward_train(&self, images: &[Tensor], captions: &[Vec<usize>]) -> Result<(Tape, Bindings, Var)> {
        let batch = CaptionBatch::new(images.to_vec(), captions)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let loss = self.training_loss(&mut tape, &b, &batch)?;
        Ok((tape, b, loss))
    }
}

fn layer_index(name: &str, prefix: &str) -> Option<usize> {
    let rest = name.strip_prefix(prefix)?;
    rest.split('.').next()?.parse().ok()
}

fn norm(tape: &mut Tape, b: &Bindings, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let g = b.var(&format!("{prefix}.weight"))?;
    let beta = b.var(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, beta, eps)
}

fn mlp(tape: &mut Tape, b: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, x, b.var(&format!("{prefix}.fc1.weight"))?, b.var(&format!("{prefix}.fc1.bias"))?)?;
    let h = tape.gelu(h);
    linear(tape, h, b.var(&format!("{prefix}.fc2.weight"))?, b.var(&format!("{prefix}.fc2.bias"))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> EncoderDecoderModel {
        let enc = ModelConfig::encoder(16, 2, 2, 32, 8);
        let dec = ModelConfig::decoder(16, 2, 2, 12, 10);
        EncoderDecoderModel::new(enc, dec, 7).unwrap()
    }

    fn image(seed: u64) -> Tensor {
        let data = (0..3 * 32 * 32).map(|i| ((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 1000.0).collect();
        Tensor::new(vec![3, 32, 32], data).unwrap()
    }

    #[test]
    fn encoder_output_shapes() {
        let m = micro();
        assert_eq!(m.encode(&image(0)).unwrap().states.shape(), &[17, 16]);
        let mut enc = m.encoder_config().clone();
        enc.use_distillation_token = true;
        let m2 = EncoderDecoderModel::new(enc, m.decoder_config().clone(), 7).unwrap();
        assert_eq!(m2.encode(&image(0)).unwrap().states.shape(), &[18, 16]);
    }

    #[test]
    fn decode_step_returns_vocab_logits() {
        let m = micro();
        let mem = m.encode(&image(1)).unwrap();
        assert_eq!(m.decode_step(&[BOS, 5, 6], &mem).unwrap().shape(), &[12]);
    }

    #[test]
    fn decode_rejects_bad_prefixes() {
        let m = micro();
        let mem = m.encode(&image(1)).unwrap();
        assert!(matches!(m.decode_step(&[BOS; 11], &mem), Err(Error::Validation(_))));
        assert!(matches!(m.decode_step(&[BOS, 12], &mem), Err(Error::Validation(_))));
    }

    #[test]
    fn captions_need_bos_and_eos() {
        let img = vec![image(0)];
        assert!(CaptionBatch::new(img.clone(), &[vec![BOS, 4, EOS]]).is_ok());
        assert!(CaptionBatch::new(img.clone(), &[vec![4, EOS]]).is_err());
        assert!(CaptionBatch::new(img, &[vec![BOS, 4]]).is_err());
    }

    #[test]
    fn layout_matches_params() {
        let m = micro();
        let layout = parameter_layout(m.encoder_config(), m.decoder_config());
        let total: usize = layout.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        assert_eq!(total, m.num_parameters());
        assert_eq!(layout.len(), m.params().len());
    }

    #[test]
    fn freezing_keeps_last_layers_trainable() {
        let mut m = micro();
        m.freeze_all_but_last(1);
        let p = m.params();
        assert!(!p.get("encoder.layer.0.attn.q_proj.weight").unwrap().requires_grad());
        assert!(p.get("encoder.layer.1.attn.q_proj.weight").unwrap().requires_grad());
        assert!(!p.get("decoder.token_embed").unwrap().requires_grad());
        assert!(p.get("decoder.lm_head.weight").unwrap().requires_grad());
    }

    #[test]
    fn mismatched_widths_use_memory_projection() {
        let enc = ModelConfig::encoder(16, 1, 2, 32, 8);
        let dec = ModelConfig::decoder(8, 1, 2, 12, 10);
        let m = EncoderDecoderModel::new(enc, dec, 1).unwrap();
        assert!(m.params().contains("decoder.memory_proj.weight"));
        let mem = m.encode(&image(2)).unwrap();
        assert_eq!(m.decode_step(&[BOS], &mem).unwrap().shape(), &[12]);
    }
}
