mod common;

use common::{max_grad_error, random_tensor, rng};
use edgecap::{Error, Tape, Tensor, Var};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// `sum(out ⊙ w)` with a fixed random `w`, so that every output element
/// carries a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(random_tensor(&mut rng(seed ^ 0xfeed), &shape, 1.0));
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

#[test]
fn identity_matmul() {
    let mut r = rng(1);
    let m = random_tensor(&mut r, &[3, 3], 2.0);
    let eye = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
    let mut tape = Tape::new();
    let a = tape.constant(eye);
    let b = tape.constant(m.clone());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c), &m);
}

#[test]
fn small_matmul_by_hand() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let b = tape.constant(t(&[2, 1], &[0., 1.]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[2., 4.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![4, 5]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Shape(_)));
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn matmul_gradient_of_sum() {
    let mut r = rng(2);
    let a = random_tensor(&mut r, &[4, 5], 1.0);
    let b = random_tensor(&mut r, &[5, 3], 1.0);
    let err = max_grad_error(&[a, b], |tape, v| {
        let c = tape.matmul(v[0], v[1]).unwrap();
        tape.sum(c)
    });
    assert!(err < 1e-6, "max relative error {err}");
}

#[test]
fn batched_matmul_broadcasts_either_side() {
    for seed in 0..3 {
        let mut r = rng(seed);
        let cases: [(Vec<usize>, Vec<usize>); 4] = [
            (vec![2, 3, 4], vec![4, 5]),
            (vec![3, 4], vec![2, 4, 5]),
            (vec![2, 3, 4], vec![2, 4, 5]),
            (vec![2, 2, 3, 4], vec![4, 2]),
        ];
        for (sa, sb) in cases {
            let a = random_tensor(&mut r, &sa, 1.0);
            let b = random_tensor(&mut r, &sb, 1.0);
            let err = max_grad_error(&[a, b], |tape, v| {
                let c = tape.matmul(v[0], v[1]).unwrap();
                weighted_sum(tape, c, seed)
            });
            assert!(err < 1e-6, "{sa:?} x {sb:?}: {err}");
        }
    }
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![3]));
    let y = tape.softmax(x, 0).unwrap();
    for &p in tape.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_shift_invariance_is_exact() {
    let mut tape = Tape::new();
    let (x, c) = (0.25, 0.5);
    let base = tape.constant(t(&[3], &[x, x + c, x + 2.0 * c]));
    let shifted = tape.constant(t(&[3], &[x + 3.0, x + c + 3.0, x + 2.0 * c + 3.0]));
    let a = tape.softmax(base, 0).unwrap();
    let b = tape.softmax(shifted, 0).unwrap();
    assert_eq!(tape.value(a), tape.value(b));
}

#[test]
fn softmax_bad_axis() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![2, 3]));
    assert!(matches!(tape.softmax(x, 2), Err(Error::Shape(_))));
}

#[test]
fn softmax_gradient_length_seven() {
    let x = random_tensor(&mut rng(3), &[7], 2.0);
    let err = max_grad_error(&[x], |tape, v| {
        let y = tape.softmax(v[0], 0).unwrap();
        weighted_sum(tape, y, 3)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn softmax_rows_sum_to_one_on_every_axis() {
    let x = random_tensor(&mut rng(4), &[3, 4, 5], 5.0);
    for axis in 0..3 {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = tape.softmax(v, axis).unwrap();
        let s = tape.mean_axis(y, axis).unwrap();
        let len = x.shape()[axis] as f64;
        for &m in tape.value(s).data() {
            assert!((m * len - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_of_constant_is_zero() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(vec![2, 4], 3.7));
    let g = tape.constant(Tensor::full(vec![4], 1.0));
    let b = tape.constant(Tensor::zeros(vec![4]));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_zero_gain_gives_bias() {
    let mut tape = Tape::new();
    let x = tape.constant(random_tensor(&mut rng(5), &[3, 4], 3.0));
    let g = tape.constant(Tensor::zeros(vec![4]));
    let b = tape.constant(t(&[4], &[0.5, -1.0, 2.0, 0.0]));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    for row in tape.value(y).data().chunks(4) {
        assert_eq!(row, &[0.5, -1.0, 2.0, 0.0]);
    }
}

#[test]
fn layer_norm_gradient() {
    let mut r = rng(6);
    let x = random_tensor(&mut r, &[3, 8], 2.0);
    let g = random_tensor(&mut r, &[8], 1.5);
    let b = random_tensor(&mut r, &[8], 1.0);
    let err = max_grad_error(&[x, g, b], |tape, v| {
        let y = tape.layer_norm(v[0], v[1], v[2], 1e-12).unwrap();
        weighted_sum(tape, y, 6)
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn gelu_values() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[0.0, 6.0]));
    let y = tape.gelu(x);
    let out = tape.value(y).data();
    assert_eq!(out[0], 0.0);
    assert!((out[1] - 6.0).abs() < 1e-6);
}

#[test]
fn gelu_gradient_at_fixed_points() {
    let x = t(&[4], &[-2.0, -0.5, 0.3, 4.0]);
    let err = max_grad_error(&[x], |tape, v| {
        let y = tape.gelu(v[0]);
        tape.sum(y)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn cross_entropy_uniform_is_log_vocab() {
    let v = 11;
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::full(vec![2, v], 0.7));
    let l = tape.cross_entropy(z, &[3, 9], usize::MAX).unwrap();
    assert!((tape.value(l).item() - (v as f64).ln()).abs() < 1e-14);
}

#[test]
fn cross_entropy_confident_is_near_zero() {
    let mut logits = vec![0.0; 5];
    logits[2] = 100.0;
    let mut tape = Tape::new();
    let z = tape.constant(t(&[1, 5], &logits));
    let l = tape.cross_entropy(z, &[2], usize::MAX).unwrap();
    assert!(tape.value(l).item() < 1e-6);
}

#[test]
fn cross_entropy_matches_log_sum_exp_by_hand() {
    let (rows, vocab) = (5, 11);
    let z = random_tensor(&mut rng(7), &[rows, vocab], 3.0);
    let targets = [0, 10, 4, 4, 7];
    let mut want = 0.0;
    for r in 0..rows {
        let row = &z.data()[r * vocab..(r + 1) * vocab];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        want += lse - row[targets[r]];
    }
    want /= rows as f64;
    let mut tape = Tape::new();
    let zv = tape.constant(z);
    let l = tape.cross_entropy(zv, &targets, usize::MAX).unwrap();
    assert!((tape.value(l).item() - want).abs() < 1e-10);
}

#[test]
fn cross_entropy_ignores_and_validates_targets() {
    let z = random_tensor(&mut rng(8), &[3, 4], 1.0);
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let all = tape.cross_entropy(zv, &[1, 0, 2], 0).unwrap();
    let zv2 = tape.constant(z.narrow_rows(&[0, 2]));
    let kept = tape.cross_entropy(zv2, &[1, 2], usize::MAX).unwrap();
    assert!((tape.value(all).item() - tape.value(kept).item()).abs() < 1e-15);
    assert!(matches!(tape.cross_entropy(zv, &[1, 4, 2], 0), Err(Error::Validation(_))));
}

#[test]
fn cross_entropy_gradient() {
    let z = random_tensor(&mut rng(9), &[5, 11], 2.0);
    let err = max_grad_error(&[z], |tape, v| tape.cross_entropy(v[0], &[1, 0, 5, 10, 3], 0).unwrap());
    assert!(err < 1e-6, "{err}");
}

#[test]
fn backward_of_sum_is_ones() {
    let x = random_tensor(&mut rng(10), &[2, 3], 1.0).with_grad();
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let s = tape.sum(v);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_of_square_is_two_x() {
    let x = random_tensor(&mut rng(11), &[4], 1.0).with_grad();
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    for (g, xv) in tape.grad(v).unwrap().iter().zip(x.data()) {
        assert_eq!(*g, 2.0 * xv);
    }
}

#[test]
fn fan_out_accumulates_every_consumer() {
    let x = random_tensor(&mut rng(12), &[3], 1.0).with_grad();
    for k in 1..5 {
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let uses: Vec<Var> = (0..k).map(|i| tape.scale(v, (i + 1) as f64)).collect();
        let mut acc = uses[0];
        for &u in &uses[1..] {
            acc = tape.add(acc, u).unwrap();
        }
        let s = tape.sum(acc);
        tape.backward(s).unwrap();
        let want = (k * (k + 1) / 2) as f64;
        assert_eq!(tape.grad(v).unwrap(), &[want; 3]);
    }
}

#[test]
fn backward_needs_scalar_and_runs_once() {
    let x = Tensor::zeros(vec![2]).with_grad();
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    assert!(matches!(tape.backward(v), Err(Error::Usage(_))));
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let s = tape.sum(v);
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::Usage(_))));
}

#[test]
fn accumulate_into_adds_across_steps() {
    let mut x = t(&[2], &[1.0, -2.0]).with_grad();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let s = tape.sum(v);
        tape.backward(s).unwrap();
        tape.accumulate_into(v, &mut x);
    }
    assert_eq!(x.grad().unwrap(), &[2.0, 2.0]);
}

#[test]
fn forward_is_deterministic() {
    let mut r = rng(13);
    let a = random_tensor(&mut r, &[6, 9], 1.0);
    let b = random_tensor(&mut r, &[9, 4], 1.0);
    let run = || {
        let mut tape = Tape::new();
        let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(x, y).unwrap();
        let s = tape.softmax(c, 1).unwrap();
        let g = tape.gelu(s);
        tape.value(g).clone()
    };
    let first = run();
    let second = run();
    assert!(first.data().iter().zip(second.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

trait NarrowRows {
    fn narrow_rows(&self, rows: &[usize]) -> Tensor;
}

impl NarrowRows for Tensor {
    fn narrow_rows(&self, rows: &[usize]) -> Tensor {
        let w = self.shape()[1];
        let data = rows.iter().flat_map(|&r| self.data()[r * w..(r + 1) * w].to_vec()).collect();
        Tensor::new(vec![rows.len(), w], data).unwrap()
    }
}
