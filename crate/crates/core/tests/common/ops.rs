//! Every differentiable tape operation wrapped as a scalar-valued probe for
//! finite-difference checking.

use super::{random_tensor, rng};
use edgecap::{Tape, Tensor, Var};

pub type Probe = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Probe,
}

fn weighted(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(random_tensor(&mut rng(seed.wrapping_mul(31) + 7), &shape, 1.0));
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

macro_rules! case {
    ($name:expr, $inputs:expr, $seed:expr, |$tape:ident, $v:ident| $body:expr) => {
        OpCase {
            name: $name,
            inputs: $inputs,
            build: Box::new(move |$tape: &mut Tape, $v: &[Var]| {
                let out = $body;
                weighted($tape, out, $seed)
            }),
        }
    };
}

/// One randomized instance of every operation for `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng(seed);
    let mut rt = |shape: &[usize], scale: f64| random_tensor(&mut r, shape, scale);
    let ids: Vec<usize> = (0..6).map(|i| (i * 7 + seed as usize) % 5).collect();
    let teacher: Vec<f64> = rt(&[3, 7], 3.0).to_vec();
    let targets: Vec<usize> = (0..4).map(|i| (i * 3 + seed as usize) % 6).collect();
    vec![
        case!("matmul", vec![rt(&[4, 5], 1.0), rt(&[5, 3], 1.0)], seed, |t, v| t.matmul(v[0], v[1]).unwrap()),
        case!("matmul_batched", vec![rt(&[2, 3, 4], 1.0), rt(&[2, 4, 2], 1.0)], seed, |t, v| t.matmul(v[0], v[1]).unwrap()),
        case!("add", vec![rt(&[3, 4], 1.0), rt(&[3, 4], 1.0)], seed, |t, v| t.add(v[0], v[1]).unwrap()),
        case!("add_broadcast", vec![rt(&[2, 3, 4], 1.0), rt(&[3, 4], 1.0)], seed, |t, v| t.add_broadcast(v[0], v[1]).unwrap()),
        case!("sub", vec![rt(&[3, 4], 1.0), rt(&[3, 4], 1.0)], seed, |t, v| t.sub(v[0], v[1]).unwrap()),
        case!("mul", vec![rt(&[3, 4], 1.0), rt(&[3, 4], 1.0)], seed, |t, v| t.mul(v[0], v[1]).unwrap()),
        case!("scale", vec![rt(&[5], 1.0)], seed, |t, v| t.scale(v[0], -1.7)),
        OpCase { name: "sum", inputs: vec![rt(&[2, 3], 1.0)], build: Box::new(|t, v| t.sum(v[0])) },
        OpCase { name: "mean", inputs: vec![rt(&[2, 3], 1.0)], build: Box::new(|t, v| t.mean(v[0])) },
        case!("mean_axis", vec![rt(&[2, 3, 4], 1.0)], seed, |t, v| t.mean_axis(v[0], 1).unwrap()),
        case!("softmax_last", vec![rt(&[3, 7], 2.0)], seed, |t, v| t.softmax(v[0], 1).unwrap()),
        case!("softmax_mid", vec![rt(&[2, 5, 3], 2.0)], seed, |t, v| t.softmax(v[0], 1).unwrap()),
        case!("layer_norm", vec![rt(&[3, 8], 2.0), rt(&[8], 1.5), rt(&[8], 1.0)], seed, |t, v| t
            .layer_norm(v[0], v[1], v[2], 1e-12)
            .unwrap()),
        case!("gelu", vec![rt(&[9], 3.0)], seed, |t, v| t.gelu(v[0])),
        case!("transpose", vec![rt(&[2, 3, 4], 1.0)], seed, |t, v| t.transpose(v[0]).unwrap()),
        case!("reshape", vec![rt(&[2, 6], 1.0)], seed, |t, v| t.reshape(v[0], &[3, 4]).unwrap()),
        case!("split_heads", vec![rt(&[2, 3, 6], 1.0)], seed, |t, v| t.split_heads(v[0], 3).unwrap()),
        case!("merge_heads", vec![rt(&[4, 3, 2], 1.0)], seed, |t, v| t.merge_heads(v[0], 2).unwrap()),
        case!("masked_softmax", vec![rt(&[2, 4, 4], 2.0)], seed, |t, v| {
            let m = t.mask_future(v[0]).unwrap();
            t.softmax(m, 2).unwrap()
        }),
        case!("concat", vec![rt(&[2, 1, 3], 1.0), rt(&[2, 4, 3], 1.0)], seed, |t, v| t.concat(&[v[0], v[1]], 1).unwrap()),
        case!("narrow", vec![rt(&[2, 5, 3], 1.0)], seed, |t, v| t.narrow(v[0], 1, 1, 3).unwrap()),
        case!("repeat_batch", vec![rt(&[2, 3], 1.0)], seed, |t, v| t.repeat_batch(v[0], 3).unwrap()),
        case!("embedding", vec![rt(&[5, 4], 1.0)], seed, |t, v| t.embedding(v[0], &ids, &[2, 3]).unwrap()),
        OpCase {
            name: "cross_entropy",
            inputs: vec![rt(&[4, 6], 2.0)],
            build: Box::new(move |t, v| t.cross_entropy(v[0], &targets, 0).unwrap()),
        },
        OpCase {
            name: "soft_target_kl",
            inputs: vec![rt(&[3, 7], 3.0)],
            build: Box::new(move |t, v| t.soft_target_kl(v[0], &teacher, 2.0, &[true, false, true]).unwrap()),
        },
        OpCase {
            name: "mse",
            inputs: vec![rt(&[3, 4], 1.0), rt(&[3, 4], 1.0)],
            build: Box::new(|t, v| t.mse(v[0], v[1]).unwrap()),
        },
    ]
}
