//! Optimisation driver: Adam with cosine decay, early stopping on the
//! final-head validation MAE with best-weight restoration, resumable state,
//! coarse-to-fine loss-weight search and a finite-difference gradient check.

mod gradcheck;
mod grid;

pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckEntry, GradCheckReport};
pub use grid::{fine_axis, grid_search, grid_search_training, GridPoint, GridResult, GridSpec};

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{mae, predict_heads};
use crate::losses::{compute_loss, LossBreakdown, LossWeights, Targets};
use crate::model::{AgeScaling, Model};
use crate::nn::GradStore;
use crate::rng;
use crate::volume::{augment, batch_tensor, AugmentationConfig, VolumeSample};

const TAG_SHUFFLE: u64 = 0x5107;
const TAG_AUGMENT: u64 = 0xA06;
const TAG_DROPOUT: u64 = 0xD40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Coarse grid over (alpha, beta, gamma) plus the refinement settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Points per axis in the refinement grid.
    pub fine_points: usize,
    pub epochs_per_point: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            alpha: vec![0.1, 0.5, 0.9],
            beta: vec![0.1, 0.5, 0.9],
            gamma: vec![0.1, 0.5, 0.9],
            fine_points: 3,
            epochs_per_point: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_train: usize,
    pub batch_val: usize,
    pub lr0: f64,
    pub patience: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub grid: GridConfig,
    pub deterministic: bool,
    /// `None` trains on the unaugmented volumes.
    pub augmentation: Option<AugmentationConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_train: 4,
            batch_val: 2,
            lr0: 1e-3,
            patience: 20,
            adam: AdamConfig::default(),
            seed: 0,
            loss_weights: LossWeights::default(),
            grid: GridConfig::default(),
            deterministic: true,
            augmentation: Some(AugmentationConfig::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.patience == 0 || self.batch_train == 0 || self.batch_val == 0 {
            return Err(Error::Config("epochs, patience and batch sizes must be at least 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        self.loss_weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        if let Some(aug) = &self.augmentation {
            aug.validate()?;
        }
        Ok(())
    }
}

/// Learning rate at epoch `t` of `total`: `lr0 * (1 + cos(pi t / T)) / 2`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Parameter("schedule length must be at least 1".into()));
    }
    if t > total {
        return Err(Error::Parameter(format!("epoch {t} is past the schedule length {total}")));
    }
    Ok(lr0 * 0.5 * (1.0 + (PI * t as f64 / total as f64).cos()))
}

/// Early stopping on a metric where lower is better. Only a strict
/// improvement resets the counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
    pub since_improvement: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: None, best_epoch: None, since_improvement: 0 }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if self.best.is_none_or(|b| metric < b) {
            self.best = Some(metric);
            self.best_epoch = Some(epoch);
            self.since_improvement = 0;
            return StopDecision::Improved;
        }
        self.since_improvement += 1;
        if self.since_improvement >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean of the step breakdowns.
    pub train: LossBreakdown,
    pub val_mae: f64,
    pub val_sex_accuracy: Option<f64>,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epochs completed so far; the next epoch to run.
    pub epoch: usize,
    pub best_val_mae: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_since_improvement: usize,
    pub stopped_early: bool,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new() -> Self {
        TrainState { epoch: 0, best_val_mae: None, best_epoch: None, epochs_since_improvement: 0, stopped_early: false, history: Vec::new() }
    }

    fn stopper(&self, patience: usize) -> EarlyStopping {
        EarlyStopping { patience, best: self.best_val_mae, best_epoch: self.best_epoch, since_improvement: self.epochs_since_improvement }
    }
}

impl Default for TrainState {
    fn default() -> Self {
        Self::new()
    }
}

/// First and second moments, indexed by parameter id.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let sizes: Vec<usize> = model.params().iter().map(|p| p.value.len()).collect();
        AdamState { step: 0, m: sizes.iter().map(|&n| vec![0.0; n]).collect(), v: sizes.iter().map(|&n| vec![0.0; n]).collect() }
    }

    /// One bias-corrected update. Parameters without a gradient are left
    /// untouched.
    pub fn update(&mut self, model: &mut Model, grads: &GradStore, lr: f64, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for p in model.params_mut() {
            let Some(g) = grads.get(p.id) else { continue };
            let (m, v) = (&mut self.m[p.id.0], &mut self.v[p.id.0]);
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            }
        }
    }
}

/// Hooks into the training loop (logging, checkpointing).
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _record: &EpochRecord, _state: &TrainState) -> Result<()> {
        Ok(())
    }

    /// Called with the new best weights.
    fn on_improvement(&mut self, _model: &Model, _state: &TrainState, _adam: &AdamState) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best weights (restored).
    pub model: Model,
    /// Weights after the last epoch that ran.
    pub last: Model,
    pub state: TrainState,
    pub adam: AdamState,
}

pub struct Trainer {
    model: Model,
    best: Option<Model>,
    cfg: TrainConfig,
    state: TrainState,
    adam: AdamState,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(&model);
        Ok(Trainer { model, best: None, cfg, state: TrainState::new(), adam })
    }

    /// Continues from saved state. `best` are the weights of the best epoch
    /// so far, when available.
    pub fn resume(model: Model, adam: AdamState, state: TrainState, best: Option<Model>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if adam.m.len() != model.params().len() {
            return Err(Error::Compatibility("optimizer state does not match the model".into()));
        }
        Ok(Trainer { model, best, cfg, state, adam })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn fit(mut self, train: &[&VolumeSample], val: &[&VolumeSample], obs: &mut dyn TrainObserver) -> Result<TrainOutcome> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Parameter("training and validation sets must be non-empty".into()));
        }
        let side = self.model.config().side;
        if let Some(s) = train.iter().chain(val).find(|s| s.voxels.dims() != [side; 3]) {
            return Err(Error::Shape(format!("sample {} has dims {:?}, model expects side {side}", s.subject_id, s.voxels.dims())));
        }
        if self.state.epoch == 0 {
            self.model.set_age_scaling(age_scaling_for(train));
        }
        let mut stopper = self.state.stopper(self.cfg.patience);
        let epochs = self.cfg.epochs;
        while self.state.epoch < epochs && !self.state.stopped_early {
            let epoch = self.state.epoch;
            let lr = cosine_lr(epoch, epochs, self.cfg.lr0)?;
            let steps = self.run_epoch(train, epoch, lr, obs)?;

            let preds = predict_heads(&self.model, val, self.cfg.batch_val)?;
            let y: Vec<f64> = val.iter().map(|s| s.age).collect();
            let val_mae = mae(&y, &preds.age[0])?;
            let val_sex_accuracy = preds.sex.first().map(|p| sex_accuracy(val, p));

            let decision = stopper.observe(epoch, val_mae);
            let improved = decision == StopDecision::Improved;
            self.state.epoch = epoch + 1;
            self.state.best_val_mae = stopper.best;
            self.state.best_epoch = stopper.best_epoch;
            self.state.epochs_since_improvement = stopper.since_improvement;
            self.state.stopped_early = decision == StopDecision::Stop;
            let record = EpochRecord { epoch, lr, train: LossBreakdown::mean(&steps), val_mae, val_sex_accuracy, improved };
            log::debug!("epoch {epoch}: loss {:.5} val MAE {val_mae:.4}", record.train.l_total);
            self.state.history.push(record.clone());
            if improved {
                self.best = Some(self.model.clone());
                obs.on_improvement(&self.model, &self.state, &self.adam)?;
            }
            obs.on_epoch(&record, &self.state)?;
        }
        let last = self.model.clone();
        let model = self.best.take().unwrap_or_else(|| self.model.clone());
        Ok(TrainOutcome { model, last, state: self.state, adam: self.adam })
    }

    fn run_epoch(&mut self, train: &[&VolumeSample], epoch: usize, lr: f64, obs: &mut dyn TrainObserver) -> Result<Vec<LossBreakdown>> {
        let seed = self.cfg.seed;
        let order = epoch_order(train.len(), seed, epoch);
        let batches = batch_indices(&order, self.cfg.batch_train);
        let depths = self.model.depths();
        let variant = self.model.variant();
        let mut out = Vec::with_capacity(batches.len());
        for (step, idx) in batches.iter().enumerate() {
            let samples: Vec<VolumeSample> = match &self.cfg.augmentation {
                Some(aug) => idx
                    .par_iter()
                    .map(|&i| {
                        let mut r = rng::derived(seed ^ aug.rng_seed, TAG_AUGMENT, (epoch * train.len() + i) as u64);
                        augment(train[i], aug, &mut r)
                    })
                    .collect(),
                None => idx.iter().map(|&i| train[i].clone()).collect(),
            };
            let refs: Vec<&VolumeSample> = samples.iter().collect();
            let x = batch_tensor(&refs)?;
            let ages: Vec<f64> = refs.iter().map(|s| s.age).collect();
            let sexes: Vec<f64> = refs.iter().map(|s| s.sex.as_target()).collect();

            let mut drop_rng = rng::derived(seed, TAG_DROPOUT, ((epoch as u64) << 32) | step as u64);
            let (outputs, tape) = self.model.forward_train(&x, Some(&mut drop_rng))?;
            let targets = Targets { input: &x, ages: &ages, sexes: &sexes };
            let (loss, out_grads) = compute_loss(&outputs, targets, &depths, &self.cfg.loss_weights, variant)?;
            let record = StepRecord { epoch, step, lr, loss };
            if !record.loss.is_finite() {
                return Err(divergence(record, "non-finite loss"));
            }
            let grads = self.model.backward(&tape, &out_grads)?;
            if !grads.sq_norm().is_finite() {
                return Err(divergence(record, "non-finite gradient"));
            }
            self.adam.update(&mut self.model, &grads, lr, &self.cfg.adam);
            self.model.update_running_stats(&tape);
            obs.on_step(&record)?;
            out.push(record.loss);
        }
        Ok(out)
    }
}

fn divergence(record: StepRecord, message: &str) -> Error {
    Error::Divergence { epoch: record.epoch, step: record.step, message: message.into(), record: Box::new(record) }
}

/// Mean and (population) standard deviation of the training ages; the age
/// heads start out predicting values on this scale.
pub fn age_scaling_for(samples: &[&VolumeSample]) -> AgeScaling {
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.age).sum::<f64>() / n;
    let var = samples.iter().map(|s| (s.age - mean).powi(2)).sum::<f64>() / n;
    AgeScaling { offset: mean, scale: var.sqrt().max(1.0) }
}

fn sex_accuracy(samples: &[&VolumeSample], probs: &[f64]) -> f64 {
    let hits = samples.iter().zip(probs).filter(|(s, &p)| (p >= 0.5) == (s.sex.as_target() == 1.0)).count();
    hits as f64 / samples.len() as f64
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::derived(seed, TAG_SHUFFLE, epoch as u64));
    order
}

/// Consecutive batches; a trailing single sample joins the previous batch
/// so batch statistics are never taken over one sample.
pub fn batch_indices(order: &[usize], batch: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// Trains a fresh model and returns the outcome.
pub fn train(model: Model, train: &[&VolumeSample], val: &[&VolumeSample], cfg: &TrainConfig, obs: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    Trainer::new(model, cfg.clone())?.fit(train, val, obs)
}
