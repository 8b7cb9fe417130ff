//! Teacher-forced training with Adam and early stopping.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::generation::{detokenize, greedy_batch, GenerationConfig};
use crate::metrics::{evaluate, MetricReport, TextPair};
use crate::model::{Bindings, CaptionBatch, EncoderDecoderModel, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::vocab::{Vocabulary, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub freeze_all_but_last_k: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 5e-5,
            max_epochs: 18,
            early_stop_patience: 3,
            freeze_all_but_last_k: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.early_stop_patience == 0 {
            return Err(invalid("early_stop_patience must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(invalid("max_epochs must be at least 1"));
        }
        Ok(())
    }
}

/// Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }

    /// Updates every trainable tensor that holds a gradient, then clears
    /// the gradients.
    pub fn step(&mut self, params: &mut ParamStore) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, t) in params.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
            let (m, v) = self
                .moments
                .entry(name.to_owned())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let w = t.data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                w[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            t.zero_grad();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience counter over validation loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, best_epoch: 0, bad_epochs: 0 }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            StopDecision::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

/// One line of a training history file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_rouge1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_rouge1: Option<f64>,
}

/// Writes one JSON object per epoch, in epoch order.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in history {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Dataset with every caption tokenized once.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub images: Vec<Tensor>,
    pub references: Vec<Vec<String>>,
    pub tokens: Vec<Vec<Vec<usize>>>,
}

impl Prepared {
    pub fn new(data: &Dataset, vocab: &Vocabulary, max_text_len: usize) -> Result<Self> {
        if data.is_empty() {
            return Err(invalid("dataset is empty"));
        }
        let mut tokens = Vec::with_capacity(data.len());
        for (i, e) in data.examples.iter().enumerate() {
            let t: Vec<Vec<usize>> = e.captions.iter().map(|c| vocab.tokenize(c)).collect();
            if let Some(long) = t.iter().find(|c| c.len() - 1 > max_text_len) {
                return Err(invalid(format!(
                    "caption of example {i} needs {} positions, decoder has {max_text_len}",
                    long.len() - 1
                )));
            }
            tokens.push(t);
        }
        Ok(Prepared {
            images: data.examples.iter().map(|e| e.image.clone()).collect(),
            references: data.examples.iter().map(|e| e.captions.clone()).collect(),
            tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn batch(&self, picks: &[(usize, usize)]) -> Result<CaptionBatch> {
        let images = picks.iter().map(|&(i, _)| self.images[i].clone()).collect();
        let caps: Vec<Vec<usize>> = picks.iter().map(|&(i, c)| self.tokens[i][c].clone()).collect();
        CaptionBatch::new(images, &caps)
    }
}

/// A training batch plus the `(example, caption)` pairs it was built from.
pub struct StepBatch {
    pub picks: Vec<(usize, usize)>,
    pub batch: CaptionBatch,
}

/// Builds the loss for one batch on a fresh tape.
pub trait Objective {
    fn loss(&mut self, model: &EncoderDecoderModel, tape: &mut Tape, b: &Bindings, step: &StepBatch) -> Result<Var>;

    /// Called after each backward sweep, for objectives that own trainable
    /// parameters of their own.
    fn after_backward(&mut self, _tape: &Tape) {}
}

/// Plain next-token cross-entropy.
pub struct CrossEntropy;

impl Objective for CrossEntropy {
    fn loss(&mut self, model: &EncoderDecoderModel, tape: &mut Tape, b: &Bindings, step: &StepBatch) -> Result<Var> {
        model.training_loss(tape, b, &step.batch)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: EncoderDecoderModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Mean teacher-forced loss over every (image, first caption) pair.
pub fn validation_loss(model: &EncoderDecoderModel, data: &Prepared, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    let picks: Vec<(usize, usize)> = (0..data.len()).map(|i| (i, 0)).collect();
    for chunk in picks.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk)?;
        let n = batch.targets.iter().filter(|&&t| t != PAD).count();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let loss = model.training_loss(&mut tape, &b, &batch)?;
        total += tape.value(loss).item() * n as f64;
        tokens += n;
    }
    Ok(total / tokens as f64)
}

/// Greedy captions for every image, decoded in chunks.
pub fn generate_captions(model: &EncoderDecoderModel, vocab: &Vocabulary, images: &[Tensor], chunk: usize) -> Result<Vec<String>> {
    let cfg = GenerationConfig::for_model(model);
    let mut out = Vec::with_capacity(images.len());
    for part in images.chunks(chunk.max(1)) {
        let refs: Vec<&Tensor> = part.iter().collect();
        for ids in greedy_batch(model, &refs, &cfg)? {
            out.push(detokenize(&ids, vocab, cfg.eos_id));
        }
    }
    Ok(out)
}

/// Greedy-decodes every image and scores against its references.
pub fn evaluate_model(model: &EncoderDecoderModel, vocab: &Vocabulary, data: &Prepared) -> Result<MetricReport> {
    let captions = generate_captions(model, vocab, &data.images, 64)?;
    let pairs: Vec<TextPair> = captions
        .into_iter()
        .zip(&data.references)
        .map(|(candidate, refs)| TextPair { candidate, references: refs.clone() })
        .collect();
    Ok(evaluate(&pairs))
}

/// Generic loop: shuffled batches with a random paraphrase per example,
/// Adam updates, per-epoch validation and early stopping that restores the
/// best weights. `on_epoch` sees each history record as it is produced.
pub fn fit(
    mut model: EncoderDecoderModel,
    vocab: &Vocabulary,
    train: &Prepared,
    val: &Prepared,
    cfg: &TrainConfig,
    objective: &mut dyn Objective,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if vocab.len() != model.decoder_config().vocab_size {
        return Err(invalid(format!(
            "vocabulary has {} entries, decoder expects {}",
            vocab.len(),
            model.decoder_config().vocab_size
        )));
    }
    if let Some(k) = cfg.freeze_all_but_last_k {
        model.freeze_all_but_last(k);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best = model.params().clone();
    let mut history = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let picks: Vec<(usize, usize)> =
            order.iter().map(|&i| (i, rng.random_range(0..train.tokens[i].len()))).collect();
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for (s, chunk) in picks.chunks(cfg.batch_size).enumerate() {
            let step = StepBatch { picks: chunk.to_vec(), batch: train.batch(chunk)? };
            let mut tape = Tape::new();
            let b = model.bind(&mut tape);
            let loss = objective.loss(&model, &mut tape, &b, &step)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!("loss became {value} at epoch {epoch}, step {}", s + 1)));
            }
            tape.backward(loss)?;
            model.params_mut().absorb_grads(&tape, &b);
            objective.after_backward(&tape);
            adam.step(model.params_mut());
            loss_sum += value;
            steps += 1;
        }
        let val_loss = validation_loss(&model, val, cfg.batch_size.max(32))?;
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!("validation loss became {val_loss} after epoch {epoch}")));
        }
        let val_rouge1 = evaluate_model(&model, vocab, val)?.rouge1.f1;
        let record = EpochRecord { epoch, train_loss: loss_sum / steps as f64, val_loss, val_rouge1, teacher_rouge1: None };
        on_epoch(&record);
        history.push(record);
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => best = model.params().clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    *model.params_mut() = best;
    model.params_mut().zero_grads();
    Ok(TrainOutcome { model, history, best_epoch: stopper.best_epoch, stopped_early })
}

/// Cross-entropy training from `model`'s current weights.
pub fn train(
    model: EncoderDecoderModel,
    vocab: &Vocabulary,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let len = model.decoder_config().max_text_len;
    let train_p = Prepared::new(train_set, vocab, len)?;
    let val_p = Prepared::new(val_set, vocab, len)?;
    fit(model, vocab, &train_p, &val_p, cfg, &mut CrossEntropy, on_epoch)
}
