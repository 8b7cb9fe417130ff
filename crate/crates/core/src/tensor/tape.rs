//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every operation appends a node holding its output value and enough context
//! to run its vector-Jacobian product. Nodes only ever reference earlier nodes,
//! so the tape is always in topological order and `backward` is a single
//! reverse sweep.

use super::gemm::{gemm, Operand};
use super::{numel, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, a_batched: bool, b_batched: bool },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    MeanAxis { x: Var, outer: usize, len: usize, inner: usize },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Transpose(Var),
    Reshape(Var),
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    MaskFuture(Var),
    Concat { parts: Vec<Var>, outer: usize, inner: usize },
    Narrow { x: Var, outer: usize, len: usize, inner: usize, start: usize },
    RepeatBatch { x: Var, times: usize },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore: usize, probs: Vec<f64>, count: usize },
    SoftTargetKl { logits: Var, teacher_probs: Vec<f64>, student_probs: Vec<f64>, rows: Vec<bool>, temperature: f64, count: usize },
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation and differentiates it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2))
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    for (o, &z) in out.iter_mut().zip(row) {
        *o = z - lse;
    }
}

/// Accumulator for `v`, or None when `v` needs no gradient.
fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Registers an existing tensor. It receives a gradient on `backward`
    /// when its `requires_grad` flag is set. Storage is shared, not copied.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let value = Tensor::from_storage(t.shape().to_vec(), t.storage());
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let value = Tensor::from_storage(t.shape().to_vec(), t.storage());
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Matrix product. `a` may carry leading dimensions (flattened into rows
    /// when `b` is a matrix); a single leading batch dimension on either or
    /// both sides is broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || shape_err(format!("matmul inner dimensions disagree: {sa:?} x {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 || sb.len() > 3 {
            return Err(shape_err(format!("matmul needs matrices, got {sa:?} x {sb:?}")));
        }
        let k = sa[sa.len() - 1];
        let (batch, m, n, a_batched, b_batched, out_shape) = if sb.len() == 2 {
            if sb[0] != k {
                return Err(mismatch());
            }
            let m = numel(&sa) / k;
            let mut out = sa.clone();
            *out.last_mut().unwrap() = sb[1];
            (1, m, sb[1], false, false, out)
        } else {
            if sb[1] != k {
                return Err(mismatch());
            }
            let n = sb[2];
            match sa.len() {
                2 => (sb[0], sa[0], n, false, true, vec![sb[0], sa[0], n]),
                3 if sa[0] == sb[0] => (sa[0], sa[1], n, true, true, vec![sa[0], sa[1], n]),
                _ => return Err(shape_err(format!("matmul batch dimensions disagree: {sa:?} x {sb:?}"))),
            }
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for bi in 0..batch {
                let a_off = if a_batched { bi * m * k } else { 0 };
                let b_off = if b_batched { bi * k * n } else { 0 };
                gemm(
                    m,
                    k,
                    n,
                    Operand::plain(&ad[a_off..a_off + m * k]),
                    Operand::plain(&bd[b_off..b_off + k * n]),
                    0.0,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.push(value, Op::MatMul { a, b, batch, m, k, n, a_batched, b_batched }, &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (biases,
    /// positional tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        let bd = self.data(b);
        let width = bd.len();
        let mut data = self.data(a).to_vec();
        for chunk in data.chunks_mut(width) {
            add_into(chunk, bd);
        }
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(value, Op::AddBroadcast(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &xd[(o * len + a) * inner..(o * len + a + 1) * inner];
                add_into(&mut out[o * inner..(o + 1) * inner], src);
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.push(value, Op::MeanAxis { x, outer, len, inner }, &[x]))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| xd[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..len {
                    let e = (xd[at(a)] - max).exp();
                    out[at(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    out[at(a)] /= total;
                }
            }
        }
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or_else(|| shape_err("layer_norm on a scalar"))?;
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return Err(shape_err(format!(
                "layer_norm affine shapes {:?}/{:?} do not match last axis {width}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Validation(format!("layer_norm eps must be positive, got {eps}")));
        }
        let xd = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let rows = xd.len() / width;
        let mut out = vec![0.0; xd.len()];
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..width {
                let h = (row[c] - mean) * is;
                xhat[r * width + c] = h;
                out[r * width + c] = g[c] * h + b[c];
            }
        }
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v * normal_cdf(v)).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err(format!("transpose needs rank >= 2, got {shape:?}")));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for (src, dst) in xd.chunks(r * c).zip(out.chunks_mut(r * c)) {
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut out_shape = shape;
        let n = out_shape.len();
        out_shape.swap(n - 2, n - 1);
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        let value = Tensor::from_storage(value.shape().to_vec(), value.storage());
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// `[B, n, h·k]` to `[B·h, n, k]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || heads == 0 || !shape[2].is_multiple_of(heads) {
            return Err(shape_err(format!("cannot split {shape:?} into {heads} heads")));
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let dk = d / heads;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for t in 0..n {
                for h in 0..heads {
                    let src = (bi * n + t) * d + h * dk;
                    let dst = ((bi * heads + h) * n + t) * dk;
                    out[dst..dst + dk].copy_from_slice(&xd[src..src + dk]);
                }
            }
        }
        let value = Tensor::from_parts(vec![b * heads, n, dk], out);
        Ok(self.push(value, Op::SplitHeads { x, heads }, &[x]))
    }

    /// `[B·h, n, k]` to `[B, n, h·k]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || heads == 0 || !shape[0].is_multiple_of(heads) {
            return Err(shape_err(format!("cannot merge {shape:?} from {heads} heads")));
        }
        let (bh, n, dk) = (shape[0], shape[1], shape[2]);
        let b = bh / heads;
        let d = dk * heads;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for t in 0..n {
                for h in 0..heads {
                    let dst = (bi * n + t) * d + h * dk;
                    let src = ((bi * heads + h) * n + t) * dk;
                    out[dst..dst + dk].copy_from_slice(&xd[src..src + dk]);
                }
            }
        }
        let value = Tensor::from_parts(vec![b, n, d], out);
        Ok(self.push(value, Op::MergeHeads { x, heads }, &[x]))
    }

    /// Sets entries above the diagonal of the trailing square matrices to
    /// negative infinity.
    pub fn mask_future(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = shape.len();
        if n < 2 || shape[n - 1] != shape[n - 2] {
            return Err(Error::Usage(format!("causal mask needs square score matrices, got {shape:?}")));
        }
        let s = shape[n - 1];
        let mut out = self.data(x).to_vec();
        for m in out.chunks_mut(s * s) {
            for i in 0..s {
                for j in i + 1..s {
                    m[i * s + j] = f64::NEG_INFINITY;
                }
            }
        }
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::MaskFuture(x), &[x]))
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| shape_err("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(shape_err(format!("concat along {axis}: {first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                out.extend_from_slice(&self.data(p)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), outer, inner }, parts))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err(format!("narrow({axis}, {start}, {len}) out of range for {shape:?}")));
        }
        let (outer, full, inner) = axis_extents(&shape, axis);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.push(value, Op::Narrow { x, outer, len: full, inner, start }, &[x]))
    }

    /// Stacks `times` copies of `x` along a new leading axis.
    pub fn repeat_batch(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(shape_err("repeat_batch with zero copies"));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(xd.len() * times);
        for _ in 0..times {
            out.extend_from_slice(xd);
        }
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape(x));
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::RepeatBatch { x, times }, &[x]))
    }

    /// Row lookup into a `[V, d]` table. Output shape is `prefix + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(shape_err(format!("embedding table must be a matrix, got {ts:?}")));
        }
        if numel(prefix) != ids.len() {
            return Err(shape_err(format!("{} ids cannot fill shape {prefix:?}", ids.len())));
        }
        let (vocab, d) = (ts[0], ts[1]);
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Validation(format!("token id {id} outside vocabulary of {vocab}")));
            }
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Mean negative log-likelihood of `targets` under softmax of the last
    /// axis, skipping rows whose target equals `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let vocab = *shape.last().ok_or_else(|| shape_err("cross_entropy on a scalar"))?;
        let rows = numel(&shape) / vocab;
        if targets.len() != rows {
            return Err(shape_err(format!("{} targets for {rows} logit rows", targets.len())));
        }
        let ld = self.data(logits);
        let mut probs = vec![0.0; ld.len()];
        let mut total = 0.0;
        let mut count = 0;
        let mut logp = vec![0.0; vocab];
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            if t >= vocab {
                return Err(Error::Validation(format!("target {t} at row {r} outside vocabulary of {vocab}")));
            }
            log_softmax_row(&ld[r * vocab..(r + 1) * vocab], &mut logp);
            total -= logp[t];
            count += 1;
            for (p, lp) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(&logp) {
                *p = lp.exp();
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), ignore, probs, count };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Mean over the selected rows of `KL(softmax(teacher / T) ‖ softmax(student / T))`.
    ///
    /// `teacher` is treated as a constant. `rows[r] == false` excludes row r.
    pub fn soft_target_kl(&mut self, logits: Var, teacher: &[f64], temperature: f64, rows: &[bool]) -> Result<Var> {
        if temperature <= 0.0 {
            return Err(Error::Validation(format!("temperature must be positive, got {temperature}")));
        }
        let shape = self.shape(logits).to_vec();
        let vocab = *shape.last().ok_or_else(|| shape_err("soft_target_kl on a scalar"))?;
        let n_rows = numel(&shape) / vocab;
        if teacher.len() != numel(&shape) || rows.len() != n_rows {
            return Err(shape_err(format!(
                "teacher logits ({}) / row mask ({}) do not match student logits {shape:?}",
                teacher.len(),
                rows.len()
            )));
        }
        let sd = self.data(logits);
        let mut student_probs = vec![0.0; sd.len()];
        let mut teacher_probs = vec![0.0; sd.len()];
        let mut ls = vec![0.0; vocab];
        let mut lt = vec![0.0; vocab];
        let mut scaled = vec![0.0; vocab];
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..n_rows {
            if !rows[r] {
                continue;
            }
            let span = r * vocab..(r + 1) * vocab;
            for (s, z) in scaled.iter_mut().zip(&sd[span.clone()]) {
                *s = z / temperature;
            }
            log_softmax_row(&scaled, &mut ls);
            for (s, z) in scaled.iter_mut().zip(&teacher[span.clone()]) {
                *s = z / temperature;
            }
            log_softmax_row(&scaled, &mut lt);
            let mut kl = 0.0;
            for v in 0..vocab {
                let pt = lt[v].exp();
                if pt > 0.0 {
                    kl += pt * (lt[v] - ls[v]);
                }
                teacher_probs[r * vocab + v] = pt;
                student_probs[r * vocab + v] = ls[v].exp();
            }
            total += kl;
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let op = Op::SoftTargetKl { logits, teacher_probs, student_probs, rows: rows.to_vec(), temperature, count };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = self.value(a).numel() as f64;
        let s = self.data(a).iter().zip(self.data(b)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), &[a, b]))
    }

    /// Runs the reverse sweep from a scalar `loss`. Afterwards, [`Tape::grad`]
    /// returns the gradient of every leaf that requires one. A tape can be
    /// swept only once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient recorded for `v` into `target`'s gradient slot.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) {
        if let Some(g) = self.grad(v) {
            target.accumulate_grad(g);
        }
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! acc {
            ($v:expr) => {
                slot(nodes, grads, $v)
            };
        }
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, batch, m, k, n, a_batched, b_batched } => {
                if let Some(da) = acc!(a) {
                    let bd = val(b);
                    for bi in 0..batch {
                        let a_off = if a_batched { bi * m * k } else { 0 };
                        let b_off = if b_batched { bi * k * n } else { 0 };
                        gemm(
                            m,
                            n,
                            k,
                            Operand::plain(&g[bi * m * n..(bi + 1) * m * n]),
                            Operand::transposed(&bd[b_off..b_off + k * n]),
                            1.0,
                            &mut da[a_off..a_off + m * k],
                        );
                    }
                }
                if let Some(db) = acc!(b) {
                    let ad = val(a);
                    for bi in 0..batch {
                        let a_off = if a_batched { bi * m * k } else { 0 };
                        let b_off = if b_batched { bi * k * n } else { 0 };
                        gemm(
                            k,
                            m,
                            n,
                            Operand::transposed(&ad[a_off..a_off + m * k]),
                            Operand::plain(&g[bi * m * n..(bi + 1) * m * n]),
                            1.0,
                            &mut db[b_off..b_off + k * n],
                        );
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(da) = acc!(a) {
                    add_into(da, g);
                }
                if let Some(db) = acc!(b) {
                    add_into(db, g);
                }
            }
            &Op::AddBroadcast(a, b) => {
                if let Some(da) = acc!(a) {
                    add_into(da, g);
                }
                if let Some(db) = acc!(b) {
                    let w = db.len();
                    for chunk in g.chunks(w) {
                        add_into(db, chunk);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(da) = acc!(a) {
                    add_into(da, g);
                }
                if let Some(db) = acc!(b) {
                    db.iter_mut().zip(g).for_each(|(d, x)| *d -= x);
                }
            }
            &Op::Mul(a, b) => {
                if let Some(da) = acc!(a) {
                    da.iter_mut().zip(g.iter().zip(val(b))).for_each(|(d, (x, y))| *d += x * y);
                }
                if let Some(db) = acc!(b) {
                    db.iter_mut().zip(g.iter().zip(val(a))).for_each(|(d, (x, y))| *d += x * y);
                }
            }
            &Op::Scale(a, c) => {
                if let Some(da) = acc!(a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
                }
            }
            &Op::Sum(a) => {
                if let Some(da) = acc!(a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean(a) => {
                if let Some(da) = acc!(a) {
                    let s = g[0] / da.len() as f64;
                    da.iter_mut().for_each(|d| *d += s);
                }
            }
            &Op::MeanAxis { x, outer, len, inner } => {
                if let Some(dx) = acc!(x) {
                    for o in 0..outer {
                        for a in 0..len {
                            for i in 0..inner {
                                dx[(o * len + a) * inner + i] += g[o * inner + i] / len as f64;
                            }
                        }
                    }
                }
            }
            &Op::Softmax { x, outer, len, inner } => {
                if let Some(dx) = acc!(x) {
                    let y = node.value.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + i;
                            let dot: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                            for a in 0..len {
                                dx[at(a)] += y[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let width = val(*gamma).len();
                if let Some(dg) = acc!(*gamma) {
                    for (gr, hr) in g.chunks(width).zip(xhat.chunks(width)) {
                        dg.iter_mut().zip(gr.iter().zip(hr)).for_each(|(d, (a, b))| *d += a * b);
                    }
                }
                if let Some(db) = acc!(*beta) {
                    for gr in g.chunks(width) {
                        add_into(db, gr);
                    }
                }
                if let Some(dx) = acc!(*x) {
                    let gamma = val(*gamma);
                    let nf = width as f64;
                    let mut dh = vec![0.0; width];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let span = r * width..(r + 1) * width;
                        let gr = &g[span.clone()];
                        let hr = &xhat[span.clone()];
                        for c in 0..width {
                            dh[c] = gr[c] * gamma[c];
                        }
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for (c, d) in dx[span].iter_mut().enumerate() {
                            *d += is / nf * (nf * dh[c] - sum_dh - hr[c] * sum_dh_h);
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                if let Some(dx) = acc!(x) {
                    for ((d, &v), gv) in dx.iter_mut().zip(val(x)).zip(g) {
                        let pdf = INV_SQRT_2PI * (-0.5 * v * v).exp();
                        *d += gv * (normal_cdf(v) + v * pdf);
                    }
                }
            }
            &Op::Transpose(x) => {
                if let Some(dx) = acc!(x) {
                    let s = nodes[x.0].value.shape();
                    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                    for (src, dst) in g.chunks(r * c).zip(dx.chunks_mut(r * c)) {
                        for i in 0..r {
                            for j in 0..c {
                                dst[i * c + j] += src[j * r + i];
                            }
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(dx) = acc!(x) {
                    add_into(dx, g);
                }
            }
            &Op::SplitHeads { x, heads } => {
                if let Some(dx) = acc!(x) {
                    let s = nodes[x.0].value.shape();
                    let (b, n, d) = (s[0], s[1], s[2]);
                    let dk = d / heads;
                    for bi in 0..b {
                        for t in 0..n {
                            for h in 0..heads {
                                let xo = (bi * n + t) * d + h * dk;
                                let go = ((bi * heads + h) * n + t) * dk;
                                add_into(&mut dx[xo..xo + dk], &g[go..go + dk]);
                            }
                        }
                    }
                }
            }
            &Op::MergeHeads { x, heads } => {
                if let Some(dx) = acc!(x) {
                    let s = nodes[x.0].value.shape();
                    let (bh, n, dk) = (s[0], s[1], s[2]);
                    let d = dk * heads;
                    for bi in 0..bh / heads {
                        for t in 0..n {
                            for h in 0..heads {
                                let go = (bi * n + t) * d + h * dk;
                                let xo = ((bi * heads + h) * n + t) * dk;
                                add_into(&mut dx[xo..xo + dk], &g[go..go + dk]);
                            }
                        }
                    }
                }
            }
            &Op::MaskFuture(x) => {
                if let Some(dx) = acc!(x) {
                    let s = *node.value.shape().last().unwrap();
                    for (src, dst) in g.chunks(s * s).zip(dx.chunks_mut(s * s)) {
                        for i in 0..s {
                            for j in 0..=i {
                                dst[i * s + j] += src[i * s + j];
                            }
                        }
                    }
                }
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = node.value.numel() / (outer * inner);
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel() / (outer * inner);
                    if let Some(dp) = acc!(p) {
                        for o in 0..*outer {
                            let src = (o * total + offset) * inner;
                            add_into(&mut dp[o * len * inner..(o + 1) * len * inner], &g[src..src + len * inner]);
                        }
                    }
                    offset += len;
                }
            }
            &Op::Narrow { x, outer, len, inner, start } => {
                if let Some(dx) = acc!(x) {
                    let taken = g.len() / (outer * inner);
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        add_into(&mut dx[dst..dst + taken * inner], &g[o * taken * inner..(o + 1) * taken * inner]);
                    }
                }
            }
            &Op::RepeatBatch { x, times } => {
                if let Some(dx) = acc!(x) {
                    let w = dx.len();
                    for t in 0..times {
                        add_into(dx, &g[t * w..(t + 1) * w]);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(dt) = acc!(*table) {
                    let d = nodes[table.0].value.shape()[1];
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, ignore, probs, count } => {
                if *count == 0 {
                    return;
                }
                if let Some(dl) = acc!(*logits) {
                    let vocab = *nodes[logits.0].value.shape().last().unwrap();
                    let s = g[0] / *count as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        let row = &mut dl[r * vocab..(r + 1) * vocab];
                        for (d, p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *d += s * p;
                        }
                        row[t] -= s;
                    }
                }
            }
            Op::SoftTargetKl { logits, teacher_probs, student_probs, rows, temperature, count } => {
                if *count == 0 {
                    return;
                }
                if let Some(dl) = acc!(*logits) {
                    let vocab = *nodes[logits.0].value.shape().last().unwrap();
                    let s = g[0] / (*count as f64 * temperature);
                    for (r, _) in rows.iter().enumerate().filter(|(_, &on)| on) {
                        for v in r * vocab..(r + 1) * vocab {
                            dl[v] += s * (student_probs[v] - teacher_probs[v]);
                        }
                    }
                }
            }
            &Op::Mse(a, b) => {
                let n = val(a).len() as f64;
                let s = 2.0 * g[0] / n;
                if let Some(da) = acc!(a) {
                    for ((d, x), y) in da.iter_mut().zip(val(a)).zip(val(b)) {
                        *d += s * (x - y);
                    }
                }
                if let Some(db) = acc!(b) {
                    for ((d, x), y) in db.iter_mut().zip(val(a)).zip(val(b)) {
                        *d -= s * (x - y);
                    }
                }
            }
        }
    }
}
