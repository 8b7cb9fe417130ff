use super::params::Bindings;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Q/K/V/O projection handles for one attention block. Weights are
/// `[d_in, d_out]` so projections are `x · W + b`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q_weight: Var,
    pub q_bias: Var,
    pub k_weight: Var,
    pub k_bias: Var,
    pub v_weight: Var,
    pub v_bias: Var,
    pub o_weight: Var,
    pub o_bias: Var,
}

impl AttentionParams {
    /// Looks up `{prefix}.{q,k,v,o}_proj.{weight,bias}`.
    pub fn bound(b: &Bindings, prefix: &str) -> Result<Self> {
        let w = |p: &str| b.var(&format!("{prefix}.{p}_proj.weight"));
        let bias = |p: &str| b.var(&format!("{prefix}.{p}_proj.bias"));
        Ok(AttentionParams {
            q_weight: w("q")?,
            q_bias: bias("q")?,
            k_weight: w("k")?,
            k_bias: bias("k")?,
            v_weight: w("v")?,
            v_bias: bias("v")?,
            o_weight: w("o")?,
            o_bias: bias("o")?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[B, q_len, d]`
    pub output: Var,
    /// Scaled pre-softmax scores `[B·h, q_len, kv_len]`, before masking.
    pub scores: Var,
    /// Softmax weights `[B·h, q_len, kv_len]`.
    pub weights: Var,
}

pub(crate) fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul(x, weight)?;
    tape.add_broadcast(y, bias)
}

/// Scaled dot-product attention over `heads` heads.
///
/// Queries come from `query_src` `[B, q_len, d]`, keys and values from
/// `kv_src` `[B, kv_len, d]`. With `causal`, position i sees kv positions
/// `<= i` only, which requires `q_len == kv_len`.
pub fn multi_head_attention(
    tape: &mut Tape,
    query_src: Var,
    kv_src: Var,
    params: &AttentionParams,
    heads: usize,
    causal: bool,
) -> Result<AttentionOutput> {
    let qs = tape.shape(query_src).to_vec();
    let ks = tape.shape(kv_src).to_vec();
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] {
        return Err(shape_err(format!("attention inputs must be [B, n, d] with equal B, got {qs:?} and {ks:?}")));
    }
    if qs[2] != ks[2] {
        return Err(shape_err(format!("attention width mismatch: query {} vs key/value {}", qs[2], ks[2])));
    }
    if causal && qs[1] != ks[1] {
        return Err(Error::Usage(format!(
            "causal attention needs equal query and key lengths, got {} and {}",
            qs[1], ks[1]
        )));
    }
    let d = qs[2];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(shape_err(format!("width {d} does not split into {heads} heads")));
    }
    let q = linear(tape, query_src, params.q_weight, params.q_bias)?;
    let k = linear(tape, kv_src, params.k_weight, params.k_bias)?;
    let v = linear(tape, kv_src, params.v_weight, params.v_bias)?;
    let q = tape.split_heads(q, heads)?;
    let k = tape.split_heads(k, heads)?;
    let v = tape.split_heads(v, heads)?;
    let kt = tape.transpose(k)?;
    let raw = tape.matmul(q, kt)?;
    let scores = tape.scale(raw, 1.0 / ((d / heads) as f64).sqrt());
    let masked = if causal { tape.mask_future(scores)? } else { scores };
    let weights = tape.softmax(masked, 2)?;
    let ctx = tape.matmul(weights, v)?;
    let merged = tape.merge_heads(ctx, heads)?;
    let output = linear(tape, merged, params.o_weight, params.o_bias)?;
    Ok(AttentionOutput { output, scores, weights })
}

/// Lower-triangular 0/1 mask `[n, n]`, used to blank the future half of
/// causal score traces.
pub(crate) fn causal_keep_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            data[i * n + j] = 1.0;
        }
    }
    Tensor::from_parts(vec![n, n], data)
}
