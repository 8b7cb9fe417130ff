//! Teacher-to-student distillation: soft labels, a distillation token and
//! layer-wise trace matching.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{Bindings, DecoderTrace, EncoderDecoderModel, Memory, ParamStore, INIT_STD};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{
    evaluate_model, fit, Adam, CrossEntropy, EpochRecord, Objective, Prepared, StepBatch, TrainConfig, TrainOutcome,
};
use crate::vocab::{Vocabulary, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    SoftLabel,
    DistillToken,
    Layerwise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillSpec {
    pub mode: DistillMode,
    pub temperature: f64,
    /// Weight of the distillation term; `1 - alpha` weights ground truth.
    pub alpha: f64,
    /// 1-based `(student_layer, teacher_layer)` pairs. `None` means the
    /// uniform map `m -> m · N_teacher / N_student`.
    pub layer_map: Option<Vec<(usize, usize)>>,
    /// Expected `(d_student, d_teacher)` per mapped layer, checked against
    /// the models when given.
    pub projection_dims: Option<Vec<(usize, usize)>>,
    pub pretrain_student_first: bool,
    /// Ground-truth-only epochs run first when `pretrain_student_first`.
    pub pretrain_epochs: usize,
}

impl Default for DistillSpec {
    fn default() -> Self {
        DistillSpec {
            mode: DistillMode::SoftLabel,
            temperature: 2.0,
            alpha: 0.5,
            layer_map: None,
            projection_dims: None,
            pretrain_student_first: false,
            pretrain_epochs: 0,
        }
    }
}

/// Uniform 1-based map `m -> m · teacher / student`.
pub fn uniform_layer_map(student_layers: usize, teacher_layers: usize) -> Vec<(usize, usize)> {
    (1..=student_layers).map(|m| (m, m * teacher_layers / student_layers)).collect()
}

impl DistillSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }

    /// The effective layer map, checked to cover every student layer with
    /// strictly increasing teacher layers.
    pub fn resolved_layer_map(&self, student_layers: usize, teacher_layers: usize) -> Result<Vec<(usize, usize)>> {
        let map = self.layer_map.clone().unwrap_or_else(|| uniform_layer_map(student_layers, teacher_layers));
        let students: Vec<usize> = map.iter().map(|p| p.0).collect();
        if students != (1..=student_layers).collect::<Vec<_>>() {
            return Err(invalid(format!("layer map must cover student layers 1..={student_layers} in order, got {map:?}")));
        }
        for w in map.windows(2) {
            if w[1].1 <= w[0].1 {
                return Err(invalid(format!("teacher layers must strictly increase, got {map:?}")));
            }
        }
        if map.iter().any(|&(_, t)| t == 0 || t > teacher_layers) {
            return Err(invalid(format!("teacher layers must lie in 1..={teacher_layers}, got {map:?}")));
        }
        Ok(map)
    }
}

/// `alpha · T² · KL(softmax(teacher/T) ‖ softmax(student/T)) + (1 - alpha) · CE`,
/// both terms averaged over rows whose target is not PAD. `teacher_logits`
/// is a constant laid out like `student_logits`.
pub fn soft_label_loss(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: &[f64],
    targets: &[usize],
    spec: &DistillSpec,
) -> Result<Var> {
    spec.validate()?;
    let ce = if spec.alpha < 1.0 { Some(tape.cross_entropy(student_logits, targets, PAD)?) } else { None };
    if spec.alpha == 0.0 {
        return Ok(ce.expect("alpha < 1"));
    }
    let rows: Vec<bool> = targets.iter().map(|&t| t != PAD).collect();
    let kl = tape.soft_target_kl(student_logits, teacher_logits, spec.temperature, &rows)?;
    let kd = tape.scale(kl, spec.alpha * spec.temperature * spec.temperature);
    match ce {
        Some(ce) => {
            let ce = tape.scale(ce, 1.0 - spec.alpha);
            tape.add(kd, ce)
        }
        None => Ok(kd),
    }
}

/// Teacher-side trace values, held as plain tensors.
#[derive(Clone, Debug)]
pub struct TraceValues {
    pub embedding: Option<Tensor>,
    pub hidden: Vec<Tensor>,
    pub scores: Vec<Tensor>,
    pub heads: usize,
}

impl TraceValues {
    pub fn from_tape(tape: &Tape, trace: &DecoderTrace, heads: usize) -> Self {
        TraceValues {
            embedding: trace.embedding.map(|v| tape.value(v).clone()),
            hidden: trace.hidden.iter().map(|&v| tape.value(v).clone()).collect(),
            scores: trace.scores.iter().map(|&v| tape.value(v).clone()).collect(),
            heads,
        }
    }
}

/// Linear maps from student width to teacher width, one for the embedding
/// output and one per mapped layer. Equal widths use the identity.
#[derive(Clone, Debug)]
pub struct Projections {
    pub params: ParamStore,
    pub d_student: usize,
    pub d_teacher: usize,
}

impl Projections {
    pub fn new(d_student: usize, d_teacher: usize, layers: &[(usize, usize)], seed: u64) -> Self {
        let mut params = ParamStore::new();
        if d_student != d_teacher {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dist = rand_distr::Normal::new(0.0, INIT_STD).expect("valid std");
            let mut add = |name: String| {
                use rand_distr::Distribution;
                let w: Vec<f64> = (0..d_student * d_teacher).map(|_| dist.sample(&mut rng)).collect();
                params.insert(format!("{name}.weight"), Tensor::new(vec![d_student, d_teacher], w).unwrap().with_grad());
                params.insert(format!("{name}.bias"), Tensor::zeros(vec![d_teacher]).with_grad());
            };
            add("embedding".into());
            for &(s, _) in layers {
                add(format!("hidden.{s}"));
            }
        }
        Projections { params, d_student, d_teacher }
    }

    fn apply(&self, tape: &mut Tape, b: &Bindings, name: &str, x: Var) -> Result<Var> {
        if self.d_student == self.d_teacher {
            return Ok(x);
        }
        let y = tape.matmul(x, b.var(&format!("{name}.weight"))?)?;
        tape.add_broadcast(y, b.var(&format!("{name}.bias"))?)
    }
}

/// Mean-pools `[B·h, T, T]` scores over heads to `[B, T·T]`.
fn pool_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let r = tape.reshape(x, &[s[0] / heads, heads, s[1] * s[2]])?;
    tape.mean_axis(r, 1)
}

/// Sum of score, hidden-state and embedding MSE terms over mapped layers.
///
/// Score traces are compared head by head when head counts agree and after
/// mean-pooling over heads otherwise. Student hidden states and embedding
/// output pass through `proj` before comparison.
pub fn layerwise_loss(
    tape: &mut Tape,
    student: &DecoderTrace,
    student_heads: usize,
    teacher: &TraceValues,
    layer_map: &[(usize, usize)],
    proj: &Projections,
    proj_bindings: &Bindings,
) -> Result<Var> {
    let missing = |what: &str, i: usize| invalid(format!("missing {what} trace for layer {i}"));
    let mut terms = Vec::new();
    for &(s, t) in layer_map {
        let ss = *student.scores.get(s - 1).ok_or_else(|| missing("student score", s))?;
        let ts = teacher.scores.get(t - 1).ok_or_else(|| missing("teacher score", t))?;
        let ts = tape.constant(ts.clone());
        let (a, b) = if student_heads == teacher.heads {
            (ss, ts)
        } else {
            (pool_heads(tape, ss, student_heads)?, pool_heads(tape, ts, teacher.heads)?)
        };
        terms.push(tape.mse(a, b)?);

        let sh = *student.hidden.get(s - 1).ok_or_else(|| missing("student hidden", s))?;
        let th = teacher.hidden.get(t - 1).ok_or_else(|| missing("teacher hidden", t))?;
        let th = tape.constant(th.clone());
        let p = proj.apply(tape, proj_bindings, &format!("hidden.{s}"), sh)?;
        terms.push(tape.mse(p, th)?);
    }
    let se = student.embedding.ok_or_else(|| invalid("missing student embedding trace"))?;
    let te = teacher.embedding.as_ref().ok_or_else(|| invalid("missing teacher embedding trace"))?;
    let te = tape.constant(te.clone());
    let p = proj.apply(tape, proj_bindings, "embedding", se)?;
    terms.push(tape.mse(p, te)?);
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Encoder forward that also returns the distillation head's logits.
pub fn encode_with_distillation_token(image: &Tensor, model: &EncoderDecoderModel) -> Result<(Memory, Tensor)> {
    if !model.encoder_config().use_distillation_token {
        return Err(Error::Usage("encoder is not configured with a distillation token".into()));
    }
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let states = model.encode_batch(&mut tape, &b, &[image])?;
    let logits = model.distill_logits(&mut tape, &b, states)?;
    let s = tape.value(states);
    let memory = Memory { states: s.reshape(s.shape()[1..].to_vec())?, source_config: model.encoder_config().clone() };
    let l = tape.value(logits);
    Ok((memory, l.reshape(vec![l.numel()])?))
}

/// Distillation-head logits for a batch of images, without gradients.
pub fn token_logits(model: &EncoderDecoderModel, images: &[Tensor], chunk: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for part in images.chunks(chunk.max(1)) {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let refs: Vec<&Tensor> = part.iter().collect();
        let states = model.encode_batch(&mut tape, &b, &refs)?;
        let l = model.distill_logits(&mut tape, &b, states)?;
        let k = *tape.shape(l).last().unwrap();
        out.extend(tape.data(l).chunks(k).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// What the distillation head is trained against.
pub enum TokenTarget<'a> {
    /// Hard class labels, plain cross-entropy.
    Labels(&'a [usize]),
    /// Teacher logits, softened with `temperature`.
    Teacher { logits: &'a [Vec<f64>], temperature: f64 },
}

/// Trains the encoder and distillation head on image-level targets. Decoder
/// weights receive no gradient. Returns the mean loss of each epoch.
pub fn fit_token_head(
    model: &mut EncoderDecoderModel,
    images: &[Tensor],
    target: &TokenTarget<'_>,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut losses = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let b = model.bind(&mut tape);
            let refs: Vec<&Tensor> = chunk.iter().map(|&i| &images[i]).collect();
            let states = model.encode_batch(&mut tape, &b, &refs)?;
            let logits = model.distill_logits(&mut tape, &b, states)?;
            let loss = match target {
                TokenTarget::Labels(labels) => {
                    let t: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                    tape.cross_entropy(logits, &t, usize::MAX)?
                }
                TokenTarget::Teacher { logits: teacher, temperature } => {
                    let t: Vec<f64> = chunk.iter().flat_map(|&i| teacher[i].iter().copied()).collect();
                    let kl = tape.soft_target_kl(logits, &t, *temperature, &vec![true; chunk.len()])?;
                    tape.scale(kl, temperature * temperature)
                }
            };
            let v = tape.value(loss).item();
            if !v.is_finite() {
                return Err(Error::Numerical(format!("token-head loss became {v} in epoch {epoch}")));
            }
            tape.backward(loss)?;
            model.params_mut().absorb_grads(&tape, &b);
            adam.step(model.params_mut());
            sum += v;
            steps += 1;
        }
        losses.push(sum / steps as f64);
    }
    model.params_mut().zero_grads();
    Ok(losses)
}

/// Teacher logits for every `(example, caption)` pair, computed once.
pub struct TeacherCache {
    logits: HashMap<(usize, usize), Vec<f64>>,
    vocab: usize,
}

impl TeacherCache {
    pub fn build(teacher: &EncoderDecoderModel, data: &Prepared, batch_size: usize) -> Result<Self> {
        let vocab = teacher.decoder_config().vocab_size;
        let picks: Vec<(usize, usize)> =
            (0..data.len()).flat_map(|i| (0..data.tokens[i].len()).map(move |c| (i, c))).collect();
        let mut logits = HashMap::with_capacity(picks.len());
        for chunk in picks.chunks(batch_size.max(1)) {
            let batch = data.batch(chunk)?;
            let mut tape = Tape::new();
            let b = teacher.bind(&mut tape);
            let l = teacher.batch_logits(&mut tape, &b, &batch, None)?;
            let d = tape.data(l);
            for (r, &pick) in chunk.iter().enumerate() {
                let n = data.tokens[pick.0][pick.1].len() - 1;
                let start = r * batch.len * vocab;
                logits.insert(pick, d[start..start + n * vocab].to_vec());
            }
        }
        Ok(TeacherCache { logits, vocab })
    }

    /// Logits laid out like the padded student batch; padded rows are zero.
    pub fn batch_logits(&self, step: &StepBatch) -> Result<Vec<f64>> {
        let (len, v) = (step.batch.len, self.vocab);
        let mut out = vec![0.0; step.picks.len() * len * v];
        for (r, pick) in step.picks.iter().enumerate() {
            let l = self.logits.get(pick).ok_or_else(|| invalid(format!("no teacher logits for {pick:?}")))?;
            out[r * len * v..r * len * v + l.len()].copy_from_slice(l);
        }
        Ok(out)
    }
}

struct SoftLabelObjective<'a> {
    cache: &'a TeacherCache,
    spec: &'a DistillSpec,
}

impl Objective for SoftLabelObjective<'_> {
    fn loss(&mut self, model: &EncoderDecoderModel, tape: &mut Tape, b: &Bindings, step: &StepBatch) -> Result<Var> {
        let logits = model.batch_logits(tape, b, &step.batch, None)?;
        let teacher = self.cache.batch_logits(step)?;
        soft_label_loss(tape, logits, &teacher, &step.batch.targets, self.spec)
    }
}

struct TokenObjective<'a> {
    teacher_logits: &'a [Vec<f64>],
    spec: &'a DistillSpec,
}

impl Objective for TokenObjective<'_> {
    fn loss(&mut self, model: &EncoderDecoderModel, tape: &mut Tape, b: &Bindings, step: &StepBatch) -> Result<Var> {
        let imgs: Vec<&Tensor> = step.batch.images.iter().collect();
        let memory = model.encode_batch(tape, b, &imgs)?;
        let batch = &step.batch;
        let logits = model.decode_batch(tape, b, memory, &batch.inputs, batch.batch, batch.len, None)?;
        let ce = tape.cross_entropy(logits, &batch.targets, PAD)?;
        let head = model.distill_logits(tape, b, memory)?;
        let t: Vec<f64> = step.picks.iter().flat_map(|&(i, _)| self.teacher_logits[i].iter().copied()).collect();
        let kl = tape.soft_target_kl(head, &t, self.spec.temperature, &vec![true; step.picks.len()])?;
        let t2 = self.spec.temperature * self.spec.temperature;
        let kd = tape.scale(kl, self.spec.alpha * t2);
        let ce = tape.scale(ce, 1.0 - self.spec.alpha);
        tape.add(kd, ce)
    }
}

struct LayerwiseObjective<'a> {
    teacher: &'a EncoderDecoderModel,
    spec: &'a DistillSpec,
    map: Vec<(usize, usize)>,
    proj: Projections,
    adam: Adam,
    bound: Option<Bindings>,
}

impl Objective for LayerwiseObjective<'_> {
    fn loss(&mut self, model: &EncoderDecoderModel, tape: &mut Tape, b: &Bindings, step: &StepBatch) -> Result<Var> {
        let teacher_values = {
            let mut tt = Tape::new();
            let tb = self.teacher.bind(&mut tt);
            let mut trace = DecoderTrace::default();
            self.teacher.batch_logits(&mut tt, &tb, &step.batch, Some(&mut trace))?;
            TraceValues::from_tape(&tt, &trace, self.teacher.decoder_config().num_heads)
        };
        let mut trace = DecoderTrace::default();
        let logits = model.batch_logits(tape, b, &step.batch, Some(&mut trace))?;
        let ce = tape.cross_entropy(logits, &step.batch.targets, PAD)?;
        let pb = self.proj.params.bind(tape);
        let lw = layerwise_loss(tape, &trace, model.decoder_config().num_heads, &teacher_values, &self.map, &self.proj, &pb)?;
        self.bound = Some(pb);
        let lw = tape.scale(lw, self.spec.alpha);
        let ce = tape.scale(ce, 1.0 - self.spec.alpha);
        tape.add(lw, ce)
    }

    fn after_backward(&mut self, tape: &Tape) {
        if let Some(pb) = self.bound.take() {
            self.proj.params.absorb_grads(tape, &pb);
            self.adam.step(&mut self.proj.params);
        }
    }
}

/// Inputs shared by the distillation entry points.
pub struct DistillData<'a> {
    pub train: &'a Prepared,
    pub val: &'a Prepared,
    /// Teacher logits per training example for the distillation token.
    pub token_targets: Option<&'a [Vec<f64>]>,
}

/// Trains `student` against a frozen `teacher`.
///
/// With `pretrain_student_first`, ground-truth epochs run first and their
/// history rows come before the distillation rows; epochs are numbered
/// continuously. Every row records the teacher's validation ROUGE-1.
#[allow(clippy::too_many_arguments)]
pub fn distill_train(
    teacher: &EncoderDecoderModel,
    teacher_vocab: &Vocabulary,
    mut student: EncoderDecoderModel,
    student_vocab: &Vocabulary,
    data: &DistillData<'_>,
    spec: &DistillSpec,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    spec.validate()?;
    if teacher_vocab != student_vocab {
        return Err(invalid("teacher and student vocabularies differ"));
    }
    if teacher.decoder_config().vocab_size != student.decoder_config().vocab_size {
        return Err(invalid("teacher and student decoders have different vocabulary sizes"));
    }
    let mut teacher = teacher.clone();
    teacher.freeze();
    let teacher_rouge1 = evaluate_model(&teacher, teacher_vocab, data.val)?.rouge1.f1;

    let mut history = Vec::new();
    let mut offset = 0;
    if spec.pretrain_student_first && spec.pretrain_epochs > 0 {
        let warm = TrainConfig { max_epochs: spec.pretrain_epochs, ..cfg.clone() };
        let out = fit(student, student_vocab, data.train, data.val, &warm, &mut CrossEntropy, &mut |r| {
            let mut r = r.clone();
            r.teacher_rouge1 = Some(teacher_rouge1);
            on_epoch(&r);
        })?;
        offset = out.history.len();
        history.extend(out.history.into_iter().map(|mut r| {
            r.teacher_rouge1 = Some(teacher_rouge1);
            r
        }));
        student = out.model;
        student.unfreeze();
    }

    let mut tag = |r: &EpochRecord| {
        let mut r = r.clone();
        r.epoch += offset;
        r.teacher_rouge1 = Some(teacher_rouge1);
        on_epoch(&r);
    };
    let out = match spec.mode {
        DistillMode::SoftLabel => {
            let cache = TeacherCache::build(&teacher, data.train, 64)?;
            let mut obj = SoftLabelObjective { cache: &cache, spec };
            fit(student, student_vocab, data.train, data.val, cfg, &mut obj, &mut tag)?
        }
        DistillMode::DistillToken => {
            if !student.encoder_config().use_distillation_token || student.encoder_config().distill_classes == 0 {
                return Err(invalid("distill_token mode needs a student encoder with a distillation token head"));
            }
            let targets = data.token_targets.ok_or_else(|| invalid("distill_token mode needs teacher token targets"))?;
            if targets.len() != data.train.len() {
                return Err(invalid(format!("{} token targets for {} examples", targets.len(), data.train.len())));
            }
            let mut obj = TokenObjective { teacher_logits: targets, spec };
            fit(student, student_vocab, data.train, data.val, cfg, &mut obj, &mut tag)?
        }
        DistillMode::Layerwise => {
            let (sd, td) = (student.decoder_config().clone(), teacher.decoder_config().clone());
            let map = spec.resolved_layer_map(sd.num_layers, td.num_layers)?;
            if let Some(dims) = &spec.projection_dims {
                if dims.len() != map.len() || dims.iter().any(|&d| d != (sd.embed_dim, td.embed_dim)) {
                    return Err(invalid(format!(
                        "projection dims {dims:?} do not match decoder widths ({}, {})",
                        sd.embed_dim, td.embed_dim
                    )));
                }
            }
            let proj = Projections::new(sd.embed_dim, td.embed_dim, &map, cfg.seed);
            let mut obj = LayerwiseObjective {
                teacher: &teacher,
                spec,
                map,
                proj,
                adam: Adam::new(cfg.learning_rate),
                bound: None,
            };
            fit(student, student_vocab, data.train, data.val, cfg, &mut obj, &mut tag)?
        }
    };
    history.extend(out.history.into_iter().map(|mut r| {
        r.epoch += offset;
        r.teacher_rouge1 = Some(teacher_rouge1);
        r
    }));
    debug_assert!(teacher.params().iter().all(|(_, t)| t.grad().is_none()));
    Ok(TrainOutcome { model: out.model, history, best_epoch: out.best_epoch + offset, stopped_early: out.stopped_early })
}
