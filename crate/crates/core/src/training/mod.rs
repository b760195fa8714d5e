//! Surrogate-gradient training loop: seeded minibatches, smoothed
//! cross-entropy, gradient clipping, cosine-decayed optimizer steps, and
//! per-epoch evaluation with firing-rate diagnostics.

mod checkpoint;
mod optim;

pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, Manifest, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use optim::{clip_grad_norm, cosine_lr, Optimizer, OptimizerKind};

use crate::data::{Dataset, TemporalDataset};
use crate::error::{Error, Result};
use crate::layers::Phase;
use crate::model::{ForwardInput, Model};
use crate::numerics::{Element, Tape, Tensor, ValueId};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

fn default_label_smoothing() -> f64 {
    0.1
}
fn default_grad_clip() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    1e-3
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_batch_size() -> usize {
    64
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub seed: u64,
    #[serde(default = "default_label_smoothing")]
    pub label_smoothing: f64,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: default_batch_size(),
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            optimizer: OptimizerKind::default(),
            seed: 0,
            label_smoothing: default_label_smoothing(),
            grad_clip: default_grad_clip(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::config("lr", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing", "must lie in [0, 1)"));
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::config("grad_clip", "must be > 0"));
        }
        Ok(())
    }
}

/// Either dataset flavor; temporal data bypasses the encoder.
#[derive(Clone, Copy)]
pub enum TrainData<'a> {
    Static(&'a Dataset),
    Temporal(&'a TemporalDataset),
}

impl<'a> TrainData<'a> {
    pub fn len(&self) -> usize {
        match self {
            TrainData::Static(d) => d.len(),
            TrainData::Temporal(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
    pub wall_s: f64,
    pub tea_alphas: Vec<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
}

impl TrainReport {
    pub fn final_eval_top1(&self) -> Option<f64> {
        self.history.iter().rev().find(|m| m.split == "eval").map(|m| m.top1)
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub top1: f64,
    pub mean_loss: f64,
    /// Mean spike value per logged LIF layer output.
    pub firing_rates: Vec<(String, f64)>,
}

/// Smoothed cross-entropy over logits `[B, C]`:
/// targets are `(1 - s) * onehot + s / C`.
pub fn cross_entropy_loss<F: Element>(
    tape: &mut Tape<F>,
    logits: ValueId,
    labels: &[usize],
    smoothing: f64,
) -> Result<ValueId> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let (batch, classes) = (shape[0], shape[1]);
    let log_probs = tape.log_softmax(logits)?;
    let mut targets = vec![F::from_f64(smoothing / classes as f64); batch * classes];
    for (b, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::contract(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        targets[b * classes + label] += F::from_f64(1.0 - smoothing);
    }
    let tgt = tape.constant(Tensor::new(vec![batch, classes], targets)?);
    let weighted = tape.mul(log_probs, tgt)?;
    let total = tape.sum_all(weighted)?;
    Ok(tape.scale(total, F::from_f64(-1.0 / batch as f64)))
}

fn top1_correct<F: Element>(logits: &Tensor<F>, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best == label
        })
        .count()
}

/// One gathered minibatch, owning its input tensor.
enum Batch {
    Static { images: Tensor<f32>, keys: Vec<u64>, encode_seed: u64 },
    Temporal { frames: Tensor<f32> },
}

impl Batch {
    fn gather(data: TrainData<'_>, indices: &[usize], encode_seed: u64) -> (Batch, Vec<usize>) {
        match data {
            TrainData::Static(d) => {
                let (images, labels) = d.gather(indices);
                let keys = indices.iter().map(|&i| i as u64).collect();
                (Batch::Static { images, keys, encode_seed }, labels)
            }
            TrainData::Temporal(d) => {
                let (frames, labels) = d.gather(indices);
                (Batch::Temporal { frames }, labels)
            }
        }
    }

    fn forward(
        &self,
        model: &mut Model<f32>,
        tape: &mut Tape<f32>,
        phase: Phase,
    ) -> Result<crate::model::ForwardOutput> {
        match self {
            Batch::Static { images, keys, encode_seed } => model.forward(
                tape,
                ForwardInput::Static { images, sample_keys: keys, encode_seed: *encode_seed },
                phase,
            ),
            Batch::Temporal { frames } => {
                model.forward(tape, ForwardInput::Temporal(frames), phase)
            }
        }
    }
}

/// Scan for the first parameter carrying a non-finite value or gradient.
fn first_non_finite<F: Element>(model: &Model<F>) -> Option<String> {
    for entry in model.params.entries() {
        if entry.value.data().iter().any(|v| !v.into_f64().is_finite())
            || entry.grad.data().iter().any(|g| !g.into_f64().is_finite())
        {
            return Some(entry.name.clone());
        }
    }
    None
}

/// Train in place. Records one `train` and one `eval` metrics row per epoch;
/// equal seeds give identical histories (wall time aside).
pub fn train(
    model: &mut Model<f32>,
    train_data: TrainData<'_>,
    eval_data: TrainData<'_>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::contract("training dataset is empty"));
    }
    let n = train_data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut optimizer = Optimizer::new(cfg.optimizer, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut rng);
        // fresh rate-encoder draw per epoch, still a pure function of seeds
        let encode_seed = model
            .cfg
            .encoder
            .seed
            .wrapping_add((epoch as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15));

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            let lr = cosine_lr(cfg.lr, step, total_steps);
            step += 1;

            let (batch, labels) = Batch::gather(train_data, chunk, encode_seed);
            let mut tape = Tape::new();
            let out = batch.forward(model, &mut tape, Phase::Train)?;
            let loss = cross_entropy_loss(&mut tape, out.logits, &labels, cfg.label_smoothing)?;
            let loss_val = tape.value(loss).item()?.into_f64();
            model.params.zero_grads();
            tape.backward(loss, &mut model.params)?;

            if !loss_val.is_finite() {
                let param = first_non_finite(model).unwrap_or_else(|| "loss".into());
                return Err(Error::NumericAbort { param });
            }
            if let Some(param) = first_non_finite(model) {
                return Err(Error::NumericAbort { param });
            }

            clip_grad_norm(&mut model.params, cfg.grad_clip);
            optimizer.step(&mut model.params, lr, cfg.weight_decay);

            loss_sum += loss_val * labels.len() as f64;
            correct += top1_correct(tape.value(out.logits), &labels);
        }
        let train_wall = t0.elapsed().as_secs_f64();
        report.history.push(EpochMetrics {
            epoch,
            split: "train".into(),
            loss: loss_sum / n as f64,
            top1: correct as f64 / n as f64,
            wall_s: train_wall,
            tea_alphas: model.tea_alphas(),
        });

        let t1 = Instant::now();
        let eval = evaluate(model, eval_data, cfg.batch_size)?;
        report.history.push(EpochMetrics {
            epoch,
            split: "eval".into(),
            loss: eval.mean_loss,
            top1: eval.top1,
            wall_s: t1.elapsed().as_secs_f64(),
            tea_alphas: model.tea_alphas(),
        });
    }
    Ok(report)
}

/// Deterministic eval-mode pass over a dataset.
pub fn evaluate(model: &mut Model<f32>, data: TrainData<'_>, batch_size: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::contract("evaluation dataset is empty"));
    }
    let n = data.len();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut rate_sums: Vec<(String, f64)> = Vec::new();
    let mut rate_weight = 0.0f64;

    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let (batch, labels) = Batch::gather(data, chunk, model.cfg.encoder.seed);
        let mut tape = Tape::new();
        let out = batch.forward(model, &mut tape, Phase::Eval)?;
        let loss = cross_entropy_loss(&mut tape, out.logits, &labels, 0.0)?;
        loss_sum += tape.value(loss).item()?.into_f64() * labels.len() as f64;
        correct += top1_correct(tape.value(out.logits), &labels);

        let w = labels.len() as f64;
        if rate_sums.is_empty() {
            rate_sums = out.spikes.iter().map(|(name, _)| (name.clone(), 0.0)).collect();
        }
        for (acc, (_, id)) in rate_sums.iter_mut().zip(&out.spikes) {
            let t = tape.value(*id);
            let mean: f64 =
                t.data().iter().map(|v| v.into_f64()).sum::<f64>() / t.numel() as f64;
            acc.1 += mean * w;
        }
        rate_weight += w;
    }
    Ok(EvalReport {
        top1: correct as f64 / n as f64,
        mean_loss: loss_sum / n as f64,
        firing_rates: rate_sums
            .into_iter()
            .map(|(name, s)| (name, s / rate_weight))
            .collect(),
    })
}

/// CSV header + rows: `epoch,split,loss,top1,wall_s,tea_alpha_0,...`.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let n_alpha = history.iter().map(|m| m.tea_alphas.len()).max().unwrap_or(0);
    let mut out = String::from("epoch,split,loss,top1,wall_s");
    for i in 0..n_alpha {
        out.push_str(&format!(",tea_alpha_{i}"));
    }
    out.push('\n');
    for m in history {
        out.push_str(&format!(
            "{},{},{},{},{:.3}",
            m.epoch, m.split, m.loss, m.top1, m.wall_s
        ));
        for i in 0..n_alpha {
            match m.tea_alphas.get(i) {
                Some(a) => out.push_str(&format!(",{a}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}
