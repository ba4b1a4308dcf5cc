//! Confidence-ranked refinement: score every prediction, hand the least
//! confident few to an expert, fine-tune on the corrected masks and
//! re-evaluate on the rest.

mod score;

pub use score::{confidence_score, rank, rank_and_select, selection_size, ConfidenceRecord};

use std::collections::{BTreeMap, HashSet};
use std::time::SystemTime;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{image_batch, AnnotatedSample, Provenance};
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, ProbabilityMask};
use crate::metrics::{wilcoxon_signed_rank, MetricReport, WilcoxonResult};
use crate::model::Model;
use crate::training::{train_step, Adam, NormMode, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertMode {
    Simulated,
    Interactive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Detection threshold for the confidence score.
    pub theta: f64,
    pub selection_fraction: f64,
    pub finetune_epochs: usize,
    pub lr_divisor: f64,
    pub expert_mode: ExpertMode,
    /// Mix the original training set into fine-tuning.
    pub replay: bool,
    /// Fine-tune with normalization running statistics held fixed.
    pub freeze_norm_stats: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            theta: 0.5,
            selection_fraction: 0.05,
            finetune_epochs: 5,
            lr_divisor: 10.0,
            expert_mode: ExpertMode::Simulated,
            replay: false,
            freeze_norm_stats: true,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::config(format!("refine.theta must lie in (0, 1), got {}", self.theta)));
        }
        if !(self.selection_fraction > 0.0 && self.selection_fraction <= 1.0) {
            return Err(Error::config(format!(
                "refine.selection_fraction must lie in (0, 1], got {}",
                self.selection_fraction
            )));
        }
        if self.finetune_epochs == 0 {
            return Err(Error::config("refine.finetune_epochs must be at least 1"));
        }
        if !(self.lr_divisor > 0.0 && self.lr_divisor.is_finite()) {
            return Err(Error::config("refine.lr_divisor must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Author {
    Simulated,
    Human,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RectifiedSample {
    pub image_id: String,
    pub prediction: ProbabilityMask,
    pub mask: BinaryMask,
    pub author: Author,
    pub created: SystemTime,
}

pub enum Rectification {
    Done(RectifiedSample),
    /// No correction available yet; the loop can resume later.
    Pending,
}

pub trait Expert {
    fn rectify(&mut self, image_id: &str, prediction: &ProbabilityMask) -> Result<Rectification>;
}

/// Returns the stored ground truth as the correction.
pub fn simulated_expert(image_id: &str, dataset: &[AnnotatedSample], prediction: &ProbabilityMask) -> Result<RectifiedSample> {
    let sample = dataset
        .iter()
        .find(|s| s.id == image_id)
        .ok_or_else(|| Error::UnknownId(image_id.to_owned()))?;
    Ok(RectifiedSample {
        image_id: image_id.to_owned(),
        prediction: prediction.clone(),
        mask: sample.require_mask()?.clone(),
        author: Author::Simulated,
        created: SystemTime::now(),
    })
}

pub struct SimulatedExpert<'a> {
    pub dataset: &'a [AnnotatedSample],
}

impl Expert for SimulatedExpert<'_> {
    fn rectify(&mut self, image_id: &str, prediction: &ProbabilityMask) -> Result<Rectification> {
        simulated_expert(image_id, self.dataset, prediction).map(Rectification::Done)
    }
}

/// Learning rates and losses of one fine-tuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneSummary {
    pub lr: f64,
    pub epoch_losses: Vec<f64>,
}

/// A few epochs at `prior_lr / lr_divisor` with a fresh optimiser and no
/// schedule. `samples` are used as given.
///
/// With `freeze_norm_stats` the running statistics stay as trained: a
/// handful of steps on a few atypical images would otherwise drag them far
/// from the population the model is evaluated on.
pub fn fine_tune(
    model: &mut Model,
    samples: &[AnnotatedSample],
    prior_lr: f64,
    train_cfg: &TrainConfig,
    refine_cfg: &RefineConfig,
) -> Result<FineTuneSummary> {
    refine_cfg.validate()?;
    train_cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let lr = prior_lr / refine_cfg.lr_divisor;
    let batch_size = train_cfg.batch_size.min(samples.len());
    let mut adam = Adam::new(train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let norm = if refine_cfg.freeze_norm_stats { NormMode::Frozen } else { NormMode::Batch };
    let mut epoch_losses = Vec::with_capacity(refine_cfg.finetune_epochs);
    for _ in 0..refine_cfg.finetune_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&AnnotatedSample> = chunk.iter().map(|&i| &samples[i]).collect();
            total += train_step(model, &mut adam, &batch, lr, train_cfg.dice_eps, norm)? * batch.len() as f64;
        }
        epoch_losses.push(total / samples.len() as f64);
    }
    Ok(FineTuneSummary { lr, epoch_losses })
}

/// Eval-mode predictions in input order.
pub fn predict_all(model: &Model, samples: &[AnnotatedSample], batch_size: usize) -> Result<Vec<ProbabilityMask>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&AnnotatedSample> = chunk.iter().collect();
        out.extend(model.predict(&image_batch(&refs)?)?);
    }
    Ok(out)
}

fn report_for(samples: &[&AnnotatedSample], preds: &[ProbabilityMask]) -> Result<Option<MetricReport>> {
    if samples.iter().any(|s| s.mask.is_none()) {
        return Ok(None);
    }
    let pairs = samples
        .iter()
        .zip(preds)
        .map(|(s, p)| (s.id.as_str(), p, s.mask.as_ref().expect("checked")));
    MetricReport::evaluate(pairs).map(Some)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    /// The expert queue, least confident first.
    pub selected: Vec<ConfidenceRecord>,
    pub used_for_training: Vec<String>,
    /// Ids scored before and after; never includes a selected id.
    pub evaluated_ids: Vec<String>,
    pub before: Option<MetricReport>,
    pub after: Option<MetricReport>,
    /// Paired test of per-image Dice, after against before.
    pub dice_test: Option<WilcoxonResult>,
    pub finetune: FineTuneSummary,
}

/// One refinement round, split so the expert step can happen out of band.
#[derive(Clone, Debug)]
pub struct RefineSession {
    samples: Vec<AnnotatedSample>,
    predictions: Vec<ProbabilityMask>,
    records: Vec<ConfidenceRecord>,
    queue: Vec<ConfidenceRecord>,
    rectified: BTreeMap<String, RectifiedSample>,
    before: Option<MetricReport>,
}

impl RefineSession {
    /// Predicts and scores every image, fills the queue and records the
    /// before-metrics on the images that stay out of it.
    pub fn prepare(model: &Model, eval_set: Vec<AnnotatedSample>, cfg: &RefineConfig, batch_size: usize) -> Result<Self> {
        cfg.validate()?;
        if eval_set.is_empty() {
            return Err(Error::EmptyEvaluationSet);
        }
        let mut seen = HashSet::new();
        if let Some(dup) = eval_set.iter().find(|s| !seen.insert(s.id.as_str())) {
            return Err(Error::Dataset(format!("duplicate image id `{}`", dup.id)));
        }
        let predictions = predict_all(model, &eval_set, batch_size)?;
        let records: Vec<_> = eval_set
            .iter()
            .zip(&predictions)
            .map(|(s, p)| confidence_score(s.id.clone(), p, cfg.theta))
            .collect();
        let k = selection_size(records.len(), cfg.selection_fraction);
        let queue: Vec<_> = rank(&records).into_iter().take(k).collect();
        let mut session = Self {
            samples: eval_set,
            predictions,
            records,
            queue,
            rectified: BTreeMap::new(),
            before: None,
        };
        let (rest, preds) = session.remainder();
        if rest.is_empty() {
            return Err(Error::EmptyEvaluationSet);
        }
        session.before = report_for(&rest, &preds)?;
        Ok(session)
    }

    fn index(&self, id: &str) -> Result<usize> {
        self.samples
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| Error::UnknownId(id.to_owned()))
    }

    fn is_queued(&self, id: &str) -> bool {
        self.queue.iter().any(|r| r.image_id == id)
    }

    /// Samples outside the queue with their current predictions.
    fn remainder(&self) -> (Vec<&AnnotatedSample>, Vec<ProbabilityMask>) {
        self.samples
            .iter()
            .zip(&self.predictions)
            .filter(|(s, _)| !self.is_queued(&s.id))
            .map(|(s, p)| (s, p.clone()))
            .unzip()
    }

    /// Clones of the images outside the queue.
    pub fn remaining_samples(&self) -> Vec<AnnotatedSample> {
        self.remainder().0.into_iter().cloned().collect()
    }

    pub fn queue(&self) -> &[ConfidenceRecord] {
        &self.queue
    }

    pub fn records(&self) -> &[ConfidenceRecord] {
        &self.records
    }

    pub fn sample(&self, id: &str) -> Result<&AnnotatedSample> {
        Ok(&self.samples[self.index(id)?])
    }

    pub fn prediction(&self, id: &str) -> Result<(&ProbabilityMask, &ConfidenceRecord)> {
        let i = self.index(id)?;
        Ok((&self.predictions[i], &self.records[i]))
    }

    pub fn before(&self) -> Option<&MetricReport> {
        self.before.as_ref()
    }

    /// Records a human correction for a queued image, replacing any earlier one.
    pub fn submit(&mut self, id: &str, mask: BinaryMask, author: Author) -> Result<()> {
        let i = self.index(id)?;
        if !self.is_queued(id) {
            return Err(Error::NotQueued(id.to_owned()));
        }
        let image = &self.samples[i].image;
        if (mask.height, mask.width) != (image.height, image.width) {
            return Err(Error::ShapeMismatch {
                op: "rectification",
                left: format!("{}x{}", mask.height, mask.width),
                right: format!("{}x{}", image.height, image.width),
            });
        }
        let r = RectifiedSample {
            image_id: id.to_owned(),
            prediction: self.predictions[i].clone(),
            mask,
            author,
            created: SystemTime::now(),
        };
        self.rectified.insert(id.to_owned(), r);
        Ok(())
    }

    pub fn rectification(&self, id: &str) -> Option<&RectifiedSample> {
        self.rectified.get(id)
    }

    /// Queued ids still waiting for a correction.
    pub fn missing(&self) -> Vec<String> {
        self.queue
            .iter()
            .filter(|r| !self.rectified.contains_key(&r.image_id))
            .map(|r| r.image_id.clone())
            .collect()
    }

    pub fn is_ready(&self) -> bool {
        self.missing().is_empty()
    }

    /// Asks the expert for every missing correction; returns how many are
    /// still pending.
    pub fn collect(&mut self, expert: &mut dyn Expert) -> Result<usize> {
        for id in self.missing() {
            let i = self.index(&id)?;
            if let Rectification::Done(r) = expert.rectify(&id, &self.predictions[i])? {
                self.submit(&id, r.mask, r.author)?;
            }
        }
        Ok(self.missing().len())
    }

    /// Training samples built from the corrections, in queue order.
    pub fn rectified_samples(&self) -> Result<Vec<AnnotatedSample>> {
        self.queue
            .iter()
            .map(|r| {
                let fix = self
                    .rectified
                    .get(&r.image_id)
                    .ok_or_else(|| Error::MissingGroundTruth(r.image_id.clone()))?;
                let s = self.sample(&r.image_id)?;
                AnnotatedSample::new(s.id.clone(), s.image.clone(), Some(fix.mask.clone()), Provenance::Rectified)
            })
            .collect()
    }

    /// Fine-tunes on the corrections (plus `replay` when enabled) and
    /// re-evaluates the images outside the queue.
    pub fn complete(
        &self,
        model: &mut Model,
        prior_lr: f64,
        train_cfg: &TrainConfig,
        refine_cfg: &RefineConfig,
        replay: &[AnnotatedSample],
    ) -> Result<RefineReport> {
        let mut set = self.rectified_samples()?;
        if refine_cfg.replay {
            set.extend(replay.iter().cloned());
        }
        let finetune = fine_tune(model, &set, prior_lr, train_cfg, refine_cfg)?;
        let (rest, _) = self.remainder();
        let owned: Vec<AnnotatedSample> = rest.iter().map(|s| (*s).clone()).collect();
        let after_preds = predict_all(model, &owned, train_cfg.batch_size)?;
        let after = report_for(&rest, &after_preds)?;
        let dice_test = match (&self.before, &after) {
            (Some(b), Some(a)) => wilcoxon_signed_rank(&a.dice, &b.dice).ok(),
            _ => None,
        };
        Ok(RefineReport {
            selected: self.queue.clone(),
            used_for_training: self.queue.iter().map(|r| r.image_id.clone()).collect(),
            evaluated_ids: rest.iter().map(|s| s.id.clone()).collect(),
            before: self.before.clone(),
            after,
            dice_test,
            finetune,
        })
    }
}

pub enum RefineOutcome {
    Done(RefineReport),
    /// Some corrections are outstanding; resume with the session.
    Pending(RefineSession),
}

/// Predict, score, select, rectify, fine-tune, re-evaluate. `replay` is
/// only read when `refine_cfg.replay` is set.
pub fn refine_loop(
    model: &mut Model,
    eval_set: Vec<AnnotatedSample>,
    expert: &mut dyn Expert,
    prior_lr: f64,
    train_cfg: &TrainConfig,
    refine_cfg: &RefineConfig,
    replay: &[AnnotatedSample],
) -> Result<RefineOutcome> {
    let mut session = RefineSession::prepare(model, eval_set, refine_cfg, train_cfg.batch_size)?;
    if session.collect(expert)? > 0 {
        return Ok(RefineOutcome::Pending(session));
    }
    session.complete(model, prior_lr, train_cfg, refine_cfg, replay).map(RefineOutcome::Done)
}
