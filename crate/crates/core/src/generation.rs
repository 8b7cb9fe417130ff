//! Greedy autoregressive captioning.

use crate::error::{invalid, Result};
use crate::model::{EncoderDecoderModel, Memory};
use crate::tensor::{Tape, Tensor};
use crate::vocab::{Vocabulary, BOS, EOS, PAD};

pub const DEFAULT_MAX_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenerationConfig {
    /// Upper bound on the returned sequence length, BOS and EOS included.
    pub max_len: usize,
    pub bos_id: usize,
    pub eos_id: usize,
    pub pad_id: usize,
    /// Keep decoding past EOS until `max_len`; used to give every model the
    /// same amount of work when benchmarking.
    pub force_length: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { max_len: DEFAULT_MAX_LEN, bos_id: BOS, eos_id: EOS, pad_id: PAD, force_length: false }
    }
}

impl GenerationConfig {
    pub fn with_max_len(max_len: usize) -> Self {
        GenerationConfig { max_len, ..Default::default() }
    }

    /// Clamps `max_len` to what the decoder's positional table allows.
    pub fn for_model(model: &EncoderDecoderModel) -> Self {
        Self::with_max_len(DEFAULT_MAX_LEN.min(model.decoder_config().max_text_len))
    }

    fn check(&self, model: &EncoderDecoderModel) -> Result<()> {
        let limit = model.decoder_config().max_text_len;
        if self.max_len < 2 || self.max_len > limit {
            return Err(invalid(format!("max_len {} outside 2..={limit}", self.max_len)));
        }
        Ok(())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding against precomputed encoder memory.
pub fn greedy_from_memory(model: &EncoderDecoderModel, memory: &Memory, cfg: &GenerationConfig) -> Result<Vec<usize>> {
    cfg.check(model)?;
    let mut seq = vec![cfg.bos_id];
    while seq.len() < cfg.max_len {
        let logits = model.decode_step(&seq, memory)?;
        let next = argmax(logits.data());
        seq.push(next);
        if next == cfg.eos_id && !cfg.force_length {
            break;
        }
    }
    Ok(seq)
}

/// Greedy decoding of several images at once. Rows are independent, so
/// each result matches [`greedy_caption`] on that image; finished rows are
/// padded internally and trimmed from the output.
pub fn greedy_batch(model: &EncoderDecoderModel, images: &[&Tensor], cfg: &GenerationConfig) -> Result<Vec<Vec<usize>>> {
    cfg.check(model)?;
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let memory = {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let m = model.encode_batch(&mut tape, &b, images)?;
        tape.value(m).clone()
    };
    let batch = images.len();
    let vocab = model.decoder_config().vocab_size;
    let mut seqs: Vec<Vec<usize>> = vec![vec![cfg.bos_id]; batch];
    let mut done = vec![false; batch];
    let mut len = 1;
    while len < cfg.max_len && done.iter().any(|d| !d) {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let mem = tape.constant(memory.clone());
        let tokens: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let logits = model.decode_batch(&mut tape, &b, mem, &tokens, batch, len, None)?;
        let data = tape.data(logits);
        for (r, seq) in seqs.iter_mut().enumerate() {
            if done[r] {
                seq.push(cfg.pad_id);
                continue;
            }
            let row = &data[(r * len + len - 1) * vocab..(r * len + len) * vocab];
            let next = argmax(row);
            seq.push(next);
            if next == cfg.eos_id && !cfg.force_length {
                done[r] = true;
            }
        }
        len += 1;
    }
    for seq in &mut seqs {
        if let Some(p) = seq.iter().position(|&t| t == cfg.eos_id) {
            if !cfg.force_length {
                seq.truncate(p + 1);
            }
        }
    }
    Ok(seqs)
}

/// Encodes `image` once, then appends argmax tokens starting from BOS until
/// EOS or `max_len`.
pub fn greedy_caption(image: &Tensor, model: &EncoderDecoderModel, cfg: &GenerationConfig) -> Result<Vec<usize>> {
    let memory = model.encode(image)?;
    greedy_from_memory(model, &memory, cfg)
}

/// Caption text for `image`: greedy ids, truncated at the first EOS, then
/// detokenized.
pub fn caption_text(image: &Tensor, model: &EncoderDecoderModel, vocab: &Vocabulary, cfg: &GenerationConfig) -> Result<String> {
    let ids = greedy_caption(image, model, cfg)?;
    Ok(detokenize(&ids, vocab, cfg.eos_id))
}

/// Strips specials and joins words, ignoring anything after the first EOS.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary, eos_id: usize) -> String {
    let end = ids.iter().position(|&t| t == eos_id).unwrap_or(ids.len());
    vocab.detokenize(&ids[..end])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn detokenize_stops_at_eos() {
        let v = Vocabulary::new(["a", "red", "circle"]);
        let ids = [BOS, v.id("a"), v.id("red"), v.id("circle"), EOS, v.id("red")];
        assert_eq!(detokenize(&ids, &v, EOS), "a red circle");
        assert_eq!(detokenize(&[BOS, EOS], &v, EOS), "");
    }
}
