//! The `ECAP` checkpoint format.
//!
//! ```text
//! "ECAP"  u32 version  u32 len  <len bytes of JSON config>  u32 count
//! count × { u16 len  <name>  u8 rank  rank × u64 dim  u8 dtype  <payload> }
//! ```
//! All integers are little-endian. dtype 0 is f32; tensors are written in
//! name order so identical models give identical files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderDecoderModel, ModelConfig, ParamStore};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 4] = b"ECAP";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

/// A model together with the vocabulary its decoder was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: EncoderDecoderModel,
    pub vocabulary: Vocabulary,
}

#[derive(Serialize, Deserialize)]
struct ConfigBlob {
    encoder: ModelConfig,
    decoder: ModelConfig,
    vocabulary: Vocabulary,
}

/// Serializes a checkpoint; values are rounded to f32.
pub fn encode_checkpoint(model: &EncoderDecoderModel, vocabulary: &Vocabulary) -> Result<Vec<u8>> {
    let blob = serde_json::to_vec(&ConfigBlob {
        encoder: model.encoder_config().clone(),
        decoder: model.decoder_config().clone(),
        vocabulary: vocabulary.clone(),
    })?;
    let params = model.params();
    let mut out = Vec::with_capacity(header_size_hint(params, blob.len()) + 4 * params.num_elements());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(&blob);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(DTYPE_F32);
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn header_size_hint(params: &ParamStore, blob_len: usize) -> usize {
    4 + 4 + 4 + blob_len + 4 + params.iter().map(|(n, t)| 2 + n.len() + 1 + 8 * t.rank() + 1).sum::<usize>()
}

/// Bytes of a checkpoint file that are not tensor payload.
pub fn header_size(model: &EncoderDecoderModel, vocabulary: &Vocabulary) -> Result<usize> {
    let blob = serde_json::to_vec(&ConfigBlob {
        encoder: model.encoder_config().clone(),
        decoder: model.decoder_config().clone(),
        vocabulary: vocabulary.clone(),
    })?;
    Ok(header_size_hint(model.params(), blob.len()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format { offset: self.pos as u64, message: message.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(format!(
                "truncated {what}: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint. Nothing is returned unless the whole file is valid.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic, expected \"ECAP\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let blob_len = r.u32("config length")? as usize;
    let blob_at = r.pos;
    let blob = r.take(blob_len, "config")?;
    let cfg: ConfigBlob = serde_json::from_slice(blob)
        .map_err(|e| Error::Format { offset: blob_at as u64, message: format!("config is not valid JSON: {e}") })?;
    let count = r.u32("tensor count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format { offset: name_at as u64, message: "tensor name is not UTF-8".into() })?
            .to_owned();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u64("dimension")?;
            shape.push(usize::try_from(d).map_err(|_| r.fail("dimension overflows usize"))?);
        }
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            r.pos -= 1;
            return Err(r.fail(format!("unsupported dtype tag {dtype}")));
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.fail("shape overflows"))?;
        let nbytes = numel.checked_mul(4).ok_or_else(|| r.fail("payload size overflows"))?;
        let payload = r.take(nbytes, &format!("payload of {name}"))?;
        let data: Vec<f64> =
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        if params.contains(&name) {
            return Err(Error::Format { offset: name_at as u64, message: format!("duplicate tensor {name}") });
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::Format { offset: name_at as u64, message: e.to_string() })?;
        params.insert(name, t.with_grad());
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let model = EncoderDecoderModel::from_params(cfg.encoder, cfg.decoder, params)?;
    Ok(Checkpoint { model, vocabulary: cfg.vocabulary })
}

/// Writes a checkpoint file and returns its size in bytes.
pub fn save_weights(model: &EncoderDecoderModel, vocabulary: &Vocabulary, path: &Path) -> Result<u64> {
    let bytes = encode_checkpoint(model, vocabulary)?;
    std::fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load_weights(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
