mod common;

use common::{max_grad_error, random_tensor, rng};
use edgecap::data::{generate_dataset, toy_vocabulary, Dataset, Normalization};
use edgecap::distill::{
    distill_train, encode_with_distillation_token, fit_token_head, layerwise_loss, soft_label_loss, token_logits,
    DistillData, DistillMode, DistillSpec, Projections, TokenTarget, TraceValues,
};
use edgecap::generation::argmax;
use edgecap::model::{DecoderTrace, ModelConfig};
use edgecap::train::{Adam, Prepared, TrainConfig};
use edgecap::vocab::{Vocabulary, BOS, EOS, PAD};
use edgecap::{EncoderDecoderModel, Error, Tape, Tensor};

fn spec(alpha: f64, temperature: f64) -> DistillSpec {
    DistillSpec { alpha, temperature, ..Default::default() }
}

fn loss_value(student: &Tensor, teacher: &[f64], targets: &[usize], s: &DistillSpec) -> f64 {
    let mut tape = Tape::new();
    let x = tape.constant(student.clone());
    let l = soft_label_loss(&mut tape, x, teacher, targets, s).unwrap();
    tape.value(l).item()
}

fn log_softmax(row: &[f64], t: f64) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / t;
    let z: f64 = row.iter().map(|&x| (x / t - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|&x| x / t - z).collect()
}

/// Plain-loop reference for the combined soft-label objective.
fn oracle(student: &[f64], teacher: &[f64], targets: &[usize], v: usize, alpha: f64, t: f64) -> f64 {
    let (mut kl, mut ce, mut n) = (0.0, 0.0, 0.0);
    for (r, &y) in targets.iter().enumerate() {
        if y == PAD {
            continue;
        }
        let s = &student[r * v..(r + 1) * v];
        let q = &teacher[r * v..(r + 1) * v];
        let (ls, lq) = (log_softmax(s, t), log_softmax(q, t));
        kl += (0..v).map(|k| lq[k].exp() * (lq[k] - ls[k])).sum::<f64>();
        ce -= log_softmax(s, 1.0)[y];
        n += 1.0;
    }
    alpha * t * t * kl / n + (1.0 - alpha) * ce / n
}

#[test]
fn kl_vanishes_for_identical_logits() {
    let x = random_tensor(&mut rng(1), &[4, 7], 3.0);
    let l = loss_value(&x, x.data(), &[4, 5, 6, 1], &spec(1.0, 2.0));
    assert!(l.abs() < 1e-12, "{l}");
}

#[test]
fn alpha_zero_is_plain_cross_entropy() {
    let x = random_tensor(&mut rng(2), &[2, 3, 7], 3.0);
    let teacher = random_tensor(&mut rng(3), &[2, 3, 7], 3.0);
    let targets = [4, 5, PAD, 6, 1, 2];
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let ce = tape.cross_entropy(v, &targets, PAD).unwrap();
    let expected = tape.value(ce).item();
    let got = loss_value(&x, teacher.data(), &targets, &spec(0.0, 4.0));
    assert_eq!(got.to_bits(), expected.to_bits());
}

#[test]
fn combined_loss_matches_reference_formula() {
    let mut r = rng(4);
    let student = random_tensor(&mut r, &[3, 7], 2.5);
    let teacher = random_tensor(&mut r, &[3, 7], 2.5);
    let targets = [3, PAD, 6];
    for (alpha, t) in [(0.5, 2.0), (0.3, 1.0), (0.9, 4.0), (1.0, 3.0)] {
        let got = loss_value(&student, teacher.data(), &targets, &spec(alpha, t));
        let want = oracle(student.data(), teacher.data(), &targets, 7, alpha, t);
        assert!((got - want).abs() < 1e-10, "alpha {alpha} T {t}: {got} vs {want}");
    }
}

#[test]
fn combined_loss_gradient_matches_finite_differences() {
    let student = random_tensor(&mut rng(5), &[3, 7], 2.0);
    let teacher = random_tensor(&mut rng(6), &[3, 7], 2.0).to_vec();
    let s = spec(0.6, 2.5);
    let err = max_grad_error(&[student], |tape, v| soft_label_loss(tape, v[0], &teacher, &[2, 5, PAD], &s).unwrap());
    assert!(err < 1e-6, "{err}");
}

#[test]
fn teacher_row_shifts_do_not_change_the_loss() {
    // Quarter-step grid values keep the shifted logits exactly representable.
    let mut r = rng(7);
    let grid = |t: Tensor| t.data().iter().map(|x| (x * 4.0).round() / 4.0).collect::<Vec<f64>>();
    let student = Tensor::new(vec![3, 7], grid(random_tensor(&mut r, &[3, 7], 3.0))).unwrap();
    let teacher = grid(random_tensor(&mut r, &[3, 7], 3.0));
    let shifted: Vec<f64> = teacher.iter().enumerate().map(|(i, x)| x + [1.5, -2.0, 8.0][i / 7]).collect();
    let s = spec(0.7, 2.0);
    let a = loss_value(&student, &teacher, &[1, 2, 3], &s);
    let b = loss_value(&student, &shifted, &[1, 2, 3], &s);
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

fn small_models(teacher_layers: usize, student_dim: usize) -> (EncoderDecoderModel, EncoderDecoderModel) {
    let enc = ModelConfig::encoder(8, 1, 2, 8, 4);
    let teacher = EncoderDecoderModel::new(enc.clone(), ModelConfig::decoder(8, teacher_layers, 2, 9, 6), 1).unwrap();
    let student = EncoderDecoderModel::new(enc, ModelConfig::decoder(student_dim, 2, 2, 9, 6), 2).unwrap();
    (teacher, student)
}

fn caption_batch() -> edgecap::model::CaptionBatch {
    let imgs = vec![random_tensor(&mut rng(8), &[3, 8, 8], 1.0), random_tensor(&mut rng(9), &[3, 8, 8], 1.0)];
    edgecap::model::CaptionBatch::new(imgs, &[vec![BOS, 4, 5, 6, EOS], vec![BOS, 7, EOS]]).unwrap()
}

fn teacher_trace(model: &EncoderDecoderModel, batch: &edgecap::model::CaptionBatch) -> TraceValues {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let mut trace = DecoderTrace::default();
    model.batch_logits(&mut tape, &b, batch, Some(&mut trace)).unwrap();
    TraceValues::from_tape(&tape, &trace, model.decoder_config().num_heads)
}

#[test]
fn layerwise_loss_is_zero_against_itself() {
    let (_, model) = small_models(2, 8);
    let batch = caption_batch();
    let values = teacher_trace(&model, &batch);
    let map = [(1, 1), (2, 2)];
    let proj = Projections::new(8, 8, &map, 0);
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let mut trace = DecoderTrace::default();
    model.batch_logits(&mut tape, &b, &batch, Some(&mut trace)).unwrap();
    let pb = proj.params.bind(&mut tape);
    let l = layerwise_loss(&mut tape, &trace, 2, &values, &map, &proj, &pb).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
}

#[test]
fn layerwise_terms_are_mean_squares() {
    let mut r = rng(10);
    let scores = random_tensor(&mut r, &[4, 3, 3], 1.0);
    let hidden = random_tensor(&mut r, &[2, 3, 5], 1.0);
    let embedding = random_tensor(&mut r, &[2, 3, 5], 1.0);
    let teacher = TraceValues {
        embedding: Some(embedding.clone()),
        hidden: vec![hidden.clone()],
        scores: vec![scores.clone()],
        heads: 2,
    };
    let mut tape = Tape::new();
    let student = DecoderTrace {
        embedding: Some(tape.constant(Tensor::zeros(vec![2, 3, 5]))),
        hidden: vec![tape.constant(Tensor::zeros(vec![2, 3, 5]))],
        scores: vec![tape.constant(Tensor::zeros(vec![4, 3, 3]))],
    };
    let proj = Projections::new(5, 5, &[(1, 1)], 0);
    let pb = proj.params.bind(&mut tape);
    let l = layerwise_loss(&mut tape, &student, 2, &teacher, &[(1, 1)], &proj, &pb).unwrap();
    let ms = |t: &Tensor| t.data().iter().map(|x| x * x).sum::<f64>() / t.numel() as f64;
    let want = ms(&scores) + ms(&hidden) + ms(&embedding);
    assert!((tape.value(l).item() - want).abs() < 1e-12);

    let short = DecoderTrace { hidden: vec![], ..student.clone() };
    assert!(matches!(
        layerwise_loss(&mut tape, &short, 2, &teacher, &[(1, 1)], &proj, &pb),
        Err(Error::Validation(_))
    ));
}

#[test]
fn narrow_student_learns_deep_teacher_traces() {
    let (teacher, mut student) = small_models(4, 6);
    let batch = caption_batch();
    let values = teacher_trace(&teacher, &batch);
    let map = [(1, 2), (2, 4)];
    let mut proj = Projections::new(6, 8, &map, 3);
    let (mut a1, mut a2) = (Adam::new(1e-2), Adam::new(1e-2));
    let mut losses = Vec::new();
    for _ in 0..100 {
        let mut tape = Tape::new();
        let b = student.bind(&mut tape);
        let mut trace = DecoderTrace::default();
        student.batch_logits(&mut tape, &b, &batch, Some(&mut trace)).unwrap();
        let pb = proj.params.bind(&mut tape);
        let l = layerwise_loss(&mut tape, &trace, 2, &values, &map, &proj, &pb).unwrap();
        losses.push(tape.value(l).item());
        tape.backward(l).unwrap();
        student.params_mut().absorb_grads(&tape, &b);
        proj.params.absorb_grads(&tape, &pb);
        a1.step(student.params_mut());
        a2.step(&mut proj.params);
    }
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last < 0.2 * first, "loss went from {first} to {last}");
    let tail: f64 = losses[90..].iter().sum::<f64>() / 10.0;
    let early: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    assert!(tail < early);
}

fn token_encoder(dim: usize, layers: usize, classes: usize) -> ModelConfig {
    ModelConfig { use_distillation_token: true, distill_classes: classes, ..ModelConfig::encoder(dim, layers, 2, 32, 8) }
}

fn toy_decoder(dim: usize) -> ModelConfig {
    ModelConfig::decoder(dim, 1, 2, toy_vocabulary().len(), 24)
}

#[test]
fn distillation_token_extends_memory() {
    let mut model = EncoderDecoderModel::new(token_encoder(16, 1, 3), toy_decoder(16), 0).unwrap();
    let img = random_tensor(&mut rng(11), &[3, 32, 32], 1.0);
    let (memory, logits) = encode_with_distillation_token(&img, &model).unwrap();
    assert_eq!(memory.states.shape(), &[16 + 2, 16]);
    assert_eq!(logits.shape(), &[3]);

    for w in model.params_mut().get_mut("encoder.dist_head.weight").unwrap().data_mut() {
        *w = 0.0;
    }
    let bias = vec![0.25, -1.0, 3.0];
    model.params_mut().get_mut("encoder.dist_head.bias").unwrap().data_mut().copy_from_slice(&bias);
    let (_, logits) = encode_with_distillation_token(&img, &model).unwrap();
    assert_eq!(logits.data(), bias.as_slice());

    let plain = EncoderDecoderModel::new(ModelConfig::encoder(16, 1, 2, 32, 8), toy_decoder(16), 0).unwrap();
    assert!(matches!(encode_with_distillation_token(&img, &plain), Err(Error::Usage(_))));
}

fn toy_images(seed: u64, n: usize) -> (Vec<Tensor>, Vec<usize>) {
    let norm = Normalization::default();
    let samples = generate_dataset(seed, n, 32).unwrap();
    let labels = samples.iter().map(|s| s.scene.len() - 1).collect();
    (samples.iter().map(|s| norm.normalize(&s.image)).collect(), labels)
}

#[test]
fn student_token_head_tracks_teacher_shape_counts() {
    let (train, labels) = toy_images(40, 400);
    let (held_out, _) = toy_images(41, 100);
    let cfg = TrainConfig { batch_size: 16, learning_rate: 2e-3, max_epochs: 12, seed: 1, ..Default::default() };

    let mut teacher = EncoderDecoderModel::new(token_encoder(48, 2, 3), toy_decoder(16), 1).unwrap();
    fit_token_head(&mut teacher, &train, &TokenTarget::Labels(&labels), &cfg).unwrap();
    let teacher_logits = token_logits(&teacher, &train, 64).unwrap();

    let mut student = EncoderDecoderModel::new(token_encoder(32, 2, 3), toy_decoder(16), 2).unwrap();
    let dec_before = student.params().get("decoder.token_embed").unwrap().clone();
    let losses = fit_token_head(
        &mut student,
        &train,
        &TokenTarget::Teacher { logits: &teacher_logits, temperature: 2.0 },
        &cfg,
    )
    .unwrap();
    assert!(losses.last().unwrap() < &losses[0]);
    assert_eq!(student.params().get("decoder.token_embed").unwrap(), &dec_before);

    let t = token_logits(&teacher, &held_out, 64).unwrap();
    let s = token_logits(&student, &held_out, 64).unwrap();
    let agree = t.iter().zip(&s).filter(|(a, b)| argmax(a) == argmax(b)).count();
    assert!(agree as f64 / held_out.len() as f64 > 0.9, "agreement {agree}/100");
}

struct ToySplits {
    train: Prepared,
    val: Prepared,
    vocab: Vocabulary,
}

fn toy_splits(n_train: usize, n_val: usize) -> ToySplits {
    let vocab = toy_vocabulary();
    let norm = Normalization::default();
    let all = generate_dataset(5, n_train + n_val, 32).unwrap();
    let (a, b) = all.split_at(n_train);
    ToySplits {
        train: Prepared::new(&Dataset::from_toy(a, &norm), &vocab, 24).unwrap(),
        val: Prepared::new(&Dataset::from_toy(b, &norm), &vocab, 24).unwrap(),
        vocab,
    }
}

fn toy_pair() -> (EncoderDecoderModel, EncoderDecoderModel) {
    let teacher =
        EncoderDecoderModel::new(ModelConfig::encoder(16, 1, 2, 32, 8), ModelConfig::decoder(16, 4, 2, 17, 24), 3)
            .unwrap();
    let student =
        EncoderDecoderModel::new(ModelConfig::encoder(8, 1, 2, 32, 8), ModelConfig::decoder(8, 2, 2, 17, 24), 4).unwrap();
    (teacher, student)
}

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig { batch_size: 8, learning_rate: 1e-3, max_epochs: epochs, early_stop_patience: 10, seed: 0, ..Default::default() }
}

#[test]
fn every_mode_leaves_the_teacher_untouched() {
    let d = toy_splits(24, 8);
    let (teacher, student) = toy_pair();
    let data = DistillData { train: &d.train, val: &d.val, token_targets: None };
    for mode in [DistillMode::SoftLabel, DistillMode::Layerwise] {
        let s = DistillSpec { mode, ..Default::default() };
        let before = teacher.clone();
        let out = distill_train(&teacher, &d.vocab, student.clone(), &d.vocab, &data, &s, &quick_cfg(2), &mut |_| {})
            .unwrap();
        assert_eq!(teacher, before);
        assert!(teacher.params().iter().all(|(_, t)| t.grad().is_none()));
        assert_ne!(out.model, student, "{mode:?} did not update the student");
    }
}

#[test]
fn vocabulary_mismatch_is_rejected() {
    let d = toy_splits(8, 4);
    let (teacher, student) = toy_pair();
    let other = Vocabulary::new(toy_vocabulary().words()[4..].iter().rev());
    let data = DistillData { train: &d.train, val: &d.val, token_targets: None };
    let err = distill_train(&teacher, &d.vocab, student, &other, &data, &DistillSpec::default(), &quick_cfg(1), &mut |_| {});
    assert!(matches!(err, Err(Error::Validation(_))));
}

#[test]
fn history_is_continuous_across_pretraining() {
    let d = toy_splits(16, 8);
    let (teacher, student) = toy_pair();
    let data = DistillData { train: &d.train, val: &d.val, token_targets: None };
    let s = DistillSpec { pretrain_student_first: true, pretrain_epochs: 2, ..Default::default() };
    let mut seen = Vec::new();
    let out =
        distill_train(&teacher, &d.vocab, student, &d.vocab, &data, &s, &quick_cfg(3), &mut |r| seen.push(r.epoch)).unwrap();
    let epochs: Vec<usize> = out.history.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, vec![1, 2, 3, 4, 5]);
    assert_eq!(seen, epochs);
    let t = out.history[0].teacher_rouge1.unwrap();
    assert!(out.history.iter().all(|r| r.teacher_rouge1 == Some(t)));
}

#[test]
fn freezing_keeps_early_layers_fixed() {
    let d = toy_splits(16, 8);
    let (teacher, student) = toy_pair();
    let data = DistillData { train: &d.train, val: &d.val, token_targets: None };
    let cfg = TrainConfig { freeze_all_but_last_k: Some(1), ..quick_cfg(2) };
    let out = distill_train(&teacher, &d.vocab, student.clone(), &d.vocab, &data, &DistillSpec::default(), &cfg, &mut |_| {})
        .unwrap();
    let changed = |name: &str| out.model.params().get(name).unwrap() != student.params().get(name).unwrap();
    assert!(!changed("decoder.layer.0.self_attn.q_proj.weight"));
    assert!(!changed("decoder.token_embed"));
    assert!(!changed("encoder.patch_embed.weight"));
    assert!(changed("decoder.layer.1.self_attn.q_proj.weight"));
    assert!(changed("decoder.ln_f.weight"));
}
