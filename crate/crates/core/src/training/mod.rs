//! Dice-loss training with Adam, plateau decay and early stopping.

mod adam;
mod schedule;

pub use adam::Adam;
pub use schedule::{EpochOutcome, PlateauTracker, IMPROVEMENT_TOL};

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::Tape;
use crate::data::{image_batch, mask_batch, AnnotatedSample};
use crate::error::{Error, Result};
use crate::metrics::{binarize, dice, iou};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub plateau_patience: usize,
    pub decay_factor: f64,
    pub dice_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            early_stop_patience: 10,
            batch_size: 8,
            lr0: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            plateau_patience: 5,
            decay_factor: 10.0,
            dice_eps: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("train.epochs", self.epochs),
            ("train.early_stop_patience", self.early_stop_patience),
            ("train.batch_size", self.batch_size),
            ("train.plateau_patience", self.plateau_patience),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(format!("train.lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay_factor > 1.0 && self.decay_factor.is_finite()) {
            return Err(Error::config(format!("train.decay_factor must exceed 1, got {}", self.decay_factor)));
        }
        for (name, b) in [("train.adam_beta1", self.adam_beta1), ("train.adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::config("train.adam_eps must be positive"));
        }
        if !(self.dice_eps > 0.0 && self.dice_eps.is_finite()) {
            return Err(Error::config("train.dice_eps must be positive"));
        }
        Ok(())
    }
}

/// Batch-joint soft dice loss, `1 − (2·Σp·t + eps) / (Σp + Σt + eps)`.
pub fn dice_loss(pred: &[f32], target: &[f32], eps: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch {
            op: "dice_loss",
            left: pred.len().to_string(),
            right: target.len().to_string(),
        });
    }
    let (mut inter, mut sum) = (0.0f64, 0.0f64);
    for (&p, &t) in pred.iter().zip(target) {
        inter += p as f64 * t as f64;
        sum += p as f64 + t as f64;
    }
    Ok(1.0 - (2.0 * inter + eps) / (sum + eps))
}

/// Validation summary for one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValScores {
    pub loss: f64,
    pub dice: f64,
    pub iou: f64,
}

pub trait Evaluator {
    fn evaluate(&mut self, model: &Model) -> Result<ValScores>;
}

/// Scores a model on a labelled set: dice loss jointly over every pixel of
/// the set, Dice and IoU averaged per image.
pub struct SetEvaluator<'a> {
    samples: &'a [AnnotatedSample],
    batch_size: usize,
    eps: f64,
}

impl<'a> SetEvaluator<'a> {
    pub fn new(samples: &'a [AnnotatedSample], batch_size: usize, eps: f64) -> Self {
        Self {
            samples,
            batch_size: batch_size.max(1),
            eps,
        }
    }
}

impl Evaluator for SetEvaluator<'_> {
    fn evaluate(&mut self, model: &Model) -> Result<ValScores> {
        if self.samples.is_empty() {
            return Err(Error::EmptyEvaluationSet);
        }
        let (mut preds, mut targets) = (Vec::new(), Vec::new());
        let (mut d, mut j) = (0.0, 0.0);
        for chunk in self.samples.chunks(self.batch_size) {
            let refs: Vec<&AnnotatedSample> = chunk.iter().collect();
            for (s, p) in chunk.iter().zip(model.predict(&image_batch(&refs)?)?) {
                let gt = s.require_mask()?;
                let hard = binarize(&p);
                d += dice(&hard, gt)?;
                j += iou(&hard, gt)?;
                preds.extend_from_slice(&p.data);
                targets.extend(gt.to_f32());
            }
        }
        let n = self.samples.len() as f64;
        Ok(ValScores {
            loss: dice_loss(&preds, &targets, self.eps)?,
            dice: d / n,
            iou: j / n,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
    pub val_iou: f64,
    /// Learning rate in effect during the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StopReason {
    EpochsExhausted,
    EarlyStop,
    /// Training hit a non-finite loss or gradient; the message names it.
    Diverged { epoch: usize, detail: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Validation scores of the weights before the first step.
    pub initial: ValScores,
    pub epochs: Vec<EpochRecord>,
    /// Epochs at whose end the learning rate was divided.
    pub decays: Vec<usize>,
    /// Epoch whose weights were kept; 0 means the initial weights.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
}

impl TrainHistory {
    /// Learning rate used by the last completed epoch.
    pub fn last_lr(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.lr)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_dice,val_iou,lr\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.epoch, e.train_loss, e.val_loss, e.val_dice, e.val_iou, e.lr
            );
        }
        out
    }
}

/// How normalization layers behave during a training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics, running statistics updated.
    Batch,
    /// Running statistics used as constants and left untouched.
    Frozen,
}

/// One optimisation step on a mini-batch; returns the batch loss.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[&AnnotatedSample],
    lr: f64,
    eps: f64,
    norm: NormMode,
) -> Result<f64> {
    let x = image_batch(batch)?;
    let target = mask_batch(batch)?;
    let mut tape = Tape::new();
    let x = tape.leaf(x, false);
    let out = match norm {
        NormMode::Batch => model.forward_train(&mut tape, x)?.output,
        NormMode::Frozen => model.forward_eval(&mut tape, x)?.output,
    };
    let loss = tape.dice_loss(out, &target, eps)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss(value));
    }
    model.params.zero_grads();
    tape.backward(loss, &mut model.params)?;
    adam.step(&mut model.params, lr)?;
    Ok(value)
}

fn check_sets(train: &[AnnotatedSample], cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    if cfg.batch_size > train.len() {
        return Err(Error::config(format!(
            "train.batch_size {} exceeds the {} training samples",
            cfg.batch_size,
            train.len()
        )));
    }
    if let Some(s) = train.iter().find(|s| s.mask.is_none()) {
        return Err(Error::MissingGroundTruth(s.id.clone()));
    }
    Ok(())
}

pub fn train(model: &mut Model, train_set: &[AnnotatedSample], val_set: &[AnnotatedSample], cfg: &TrainConfig) -> Result<TrainHistory> {
    if val_set.is_empty() {
        return Err(Error::EmptyEvaluationSet);
    }
    let mut eval = SetEvaluator::new(val_set, cfg.batch_size, cfg.dice_eps);
    train_with_evaluator(model, train_set, &mut eval, cfg)
}

/// Trains in place and leaves `model` holding the weights with the lowest
/// validation loss seen, including the starting weights.
pub fn train_with_evaluator(
    model: &mut Model,
    train_set: &[AnnotatedSample],
    evaluator: &mut dyn Evaluator,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    check_sets(train_set, cfg)?;
    let initial = evaluator.evaluate(model)?;
    let mut tracker = PlateauTracker::new(
        initial.loss,
        cfg.lr0,
        cfg.plateau_patience,
        cfg.early_stop_patience,
        cfg.decay_factor,
    );
    let mut best = (0, model.snapshot());
    let mut adam = Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory {
        initial,
        epochs: Vec::new(),
        decays: Vec::new(),
        best_epoch: 0,
        best_val_loss: initial.loss,
        stop: StopReason::EpochsExhausted,
    };

    for epoch in 1..=cfg.epochs {
        let lr = tracker.lr();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut diverged = None;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&AnnotatedSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            match train_step(model, &mut adam, &batch, lr, cfg.dice_eps, NormMode::Batch) {
                Ok(l) => total += l * batch.len() as f64,
                Err(e @ (Error::NonFiniteGradient(_) | Error::NonFiniteLoss(_))) => {
                    diverged = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(detail) = diverged {
            log::warn!("epoch {epoch}: {detail}");
            history.stop = StopReason::Diverged { epoch, detail };
            break;
        }
        let val = evaluator.evaluate(model)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_loss: val.loss,
            val_dice: val.dice,
            val_iou: val.iou,
            lr,
        });
        log::info!(
            "epoch {epoch}: train {:.5} val {:.5} dice {:.4} lr {lr:e}",
            total / train_set.len() as f64,
            val.loss,
            val.dice
        );
        let outcome = tracker.observe(val.loss);
        if outcome.improved {
            best = (epoch, model.snapshot());
            history.best_epoch = epoch;
            history.best_val_loss = val.loss;
        }
        if outcome.decayed {
            history.decays.push(epoch);
        }
        if outcome.stop {
            history.stop = StopReason::EarlyStop;
            break;
        }
    }
    model.restore(&best.1);
    Ok(history)
}

/// Seeded shuffle, then the first `⌈0.8·N⌉` items train and the rest validate.
pub fn split_80_20<T: Clone>(items: &[T], seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 5 {
        return Err(Error::TooFewSamples {
            needed: 5,
            got: items.len(),
        });
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (4 * items.len()).div_ceil(5);
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect();
    Ok((pick(&order[..cut]), pick(&order[cut..])))
}

/// Writes `config.json`, `history.csv`, `history.json` and `best.ckpt`.
pub fn save_run(dir: &Path, config_json: &str, history: &TrainHistory, model: &Model) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), config_json)?;
    std::fs::write(dir.join("history.csv"), history.to_csv())?;
    std::fs::write(dir.join("history.json"), serde_json::to_string_pretty(history)?)?;
    crate::checkpoint::save(model, &dir.join("best.ckpt"))
}
