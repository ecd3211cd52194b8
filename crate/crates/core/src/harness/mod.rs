//! Experiment protocol: domain construction, base training, the one-shot
//! incremental loop with learning-rate selection, and evaluation.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::augment::ImageSample;
use crate::batchnorm::StatsMode;
use crate::error::{invalid, Error, Result};
use crate::models::{loss_ce, Model};
use crate::optim::{CosineSchedule, OptState};
use crate::rng::Rng;
use crate::tensor::Graph;

mod dil;
mod report;

pub use dil::{
    lr_search, many_shot_dil, one_shot_dil, run_trials, GemStep, GridPoint, LrSearch, Method,
    OneShotConfig, RunOutcome, Termination, TrialContext, TrialSet,
};
pub use report::{aggregate, median, population_std, RunReport, Stat, TrialRow};

/// Which raw classes form the new domain and which original class absorbs it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Raw class whose samples become the new domain (C1).
    pub new_class: usize,
    /// Raw original-domain class sharing its label with the new domain (C2).
    pub absorbing_class: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Caps applied after splitting the original domain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_orig_train: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_orig_val: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_orig_test: Option<usize>,
}

fn default_train_fraction() -> f64 {
    0.6
}

fn default_val_fraction() -> f64 {
    0.2
}

impl DomainSpec {
    pub fn new(new_class: usize, absorbing_class: usize) -> Self {
        Self {
            new_class,
            absorbing_class,
            train_fraction: default_train_fraction(),
            val_fraction: default_val_fraction(),
            max_orig_train: None,
            max_orig_val: None,
            max_orig_test: None,
        }
    }

    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if self.new_class == self.absorbing_class {
            out.push(("new_class".into(), "must differ from absorbing_class".into()));
        }
        let (tr, va) = (self.train_fraction, self.val_fraction);
        if !(tr > 0.0 && tr < 1.0) {
            out.push(("train_fraction".into(), "must lie in (0, 1)".into()));
        }
        if !(va >= 0.0 && tr + va < 1.0) {
            out.push(("val_fraction".into(), "must be nonnegative and leave room for a test split".into()));
        }
        out
    }
}

/// Disjoint train/validation/test parts of one domain.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

/// Both domains relabelled to `1..=num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Domains {
    pub orig: Split,
    pub new: Split,
    pub num_classes: usize,
    /// Shared label of the absorbing class and the new domain.
    pub y0: usize,
    /// Raw class id → model label, for original-domain classes.
    pub labels: BTreeMap<usize, usize>,
}

fn partition(
    mut items: Vec<ImageSample>,
    spec: &DomainSpec,
    caps: [Option<usize>; 3],
    rng: &mut Rng,
) -> Split {
    items.shuffle(rng);
    let n = items.len();
    let n_train = (spec.train_fraction * n as f64).round() as usize;
    let n_val = ((spec.val_fraction * n as f64).round() as usize).min(n - n_train);
    let mut test = items.split_off(n_train + n_val);
    let mut val = items.split_off(n_train);
    let mut train = items;
    for (part, cap) in [&mut train, &mut val, &mut test].into_iter().zip(caps) {
        if let Some(c) = cap {
            part.truncate(c);
        }
    }
    Split { train, val, test }
}

/// Builds the original domain (every class but `new_class`, relabelled in
/// ascending raw order) and the new domain (`new_class` relabelled to the
/// absorbing class's label). Samples keep their input order before shuffling,
/// so the same seed yields the same splits.
pub fn split_domains(dataset: &[ImageSample], spec: &DomainSpec, rng: &mut Rng) -> Result<Domains> {
    if let Some((key, msg)) = spec.problems().into_iter().next() {
        return Err(invalid(format!("domain spec `{key}` {msg}")));
    }
    let classes: BTreeSet<usize> = dataset.iter().map(|s| s.label).collect();
    for c in [spec.new_class, spec.absorbing_class] {
        if !classes.contains(&c) {
            return Err(invalid(format!("class {c} is absent from the dataset")));
        }
    }
    let labels: BTreeMap<usize, usize> = classes
        .iter()
        .filter(|&&c| c != spec.new_class)
        .enumerate()
        .map(|(i, &c)| (c, i + 1))
        .collect();
    let num_classes = labels.len();
    if num_classes < 2 {
        return Err(invalid("the original domain needs at least two classes"));
    }
    let y0 = labels[&spec.absorbing_class];
    let (mut orig, mut new) = (Vec::new(), Vec::new());
    for s in dataset {
        if s.label == spec.new_class {
            new.push(ImageSample { image: s.image.clone(), label: y0 });
        } else {
            orig.push(ImageSample { image: s.image.clone(), label: labels[&s.label] });
        }
    }
    let orig = partition(orig, spec, [spec.max_orig_train, spec.max_orig_val, spec.max_orig_test], rng);
    let new = partition(new, spec, [None; 3], rng);
    Ok(Domains { orig, new, num_classes, y0, labels })
}

/// Base training hyperparameters: SGD with a cosine-annealed rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseTrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_lr")]
    pub max_lr: f64,
    #[serde(default)]
    pub min_lr: f64,
}

fn default_epochs() -> usize {
    30
}

fn default_batch_size() -> usize {
    64
}

fn default_max_lr() -> f64 {
    0.1
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            max_lr: default_max_lr(),
            min_lr: 0.0,
        }
    }
}

impl BaseTrainConfig {
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if self.batch_size < 2 {
            out.push(("batch_size".into(), "must be at least 2".into()));
        }
        if !(self.max_lr >= self.min_lr && self.min_lr >= 0.0 && self.max_lr.is_finite()) {
            out.push(("max_lr".into(), "need 0 <= min_lr <= max_lr < inf".into()));
        }
        out
    }
}

/// What [`train_base`] leaves behind besides the trained weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    /// Mean mini-batch loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub optimizer: OptState,
}

/// Trains in updated-stats mode for `cfg.epochs` shuffled passes. A trailing
/// mini-batch of one sample is dropped since it has no batch variance.
pub fn train_base(
    model: &mut Model,
    train: &[ImageSample],
    cfg: &BaseTrainConfig,
    rng: &mut Rng,
) -> Result<TrainSummary> {
    if let Some((key, msg)) = cfg.problems().into_iter().next() {
        return Err(invalid(format!("base training `{key}` {msg}")));
    }
    if train.len() < 2 {
        return Err(invalid("base training needs at least two samples"));
    }
    let mut batches = train.len() / cfg.batch_size;
    if train.len() % cfg.batch_size >= 2 {
        batches += 1;
    }
    let schedule = CosineSchedule {
        max_lr: cfg.max_lr,
        min_lr: cfg.min_lr,
        total_steps: (cfg.epochs * batches) as u64,
    };
    let mut opt = OptState::sgd(Some(schedule));
    model.set_mode(StatsMode::UpdatedStats);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).take(batches).enumerate() {
            let batch: Vec<ImageSample> = idx.iter().map(|&i| train[i].clone()).collect();
            let mut g = Graph::new();
            let loss = loss_ce(model, &mut g, &batch, StatsMode::UpdatedStats)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch}, batch {b}: loss is {value}")));
            }
            total += value;
            let grads = g.param_grads(loss, model.params())?;
            let lr = opt.current_lr(cfg.max_lr);
            opt.step(model.params_mut(), &grads, lr)?;
        }
        epoch_loss.push(total / batches as f64);
    }
    Ok(TrainSummary { epoch_loss, optimizer: opt })
}

/// Fraction of samples whose predicted label (through the running
/// statistics) equals their label.
pub fn evaluate(model: &Model, split: &[ImageSample]) -> Result<f64> {
    if split.is_empty() {
        return Err(invalid("cannot evaluate on an empty split"));
    }
    let preds = model.predict_samples(split)?;
    let hits = preds.iter().zip(split).filter(|(p, s)| p.label == s.label).count();
    Ok(hits as f64 / split.len() as f64)
}

/// Up to `n` samples of `pool` that the model does not assign to their
/// label, drawn uniformly. Warns when fewer than `n` exist.
pub fn pick_new_samples(
    model: &Model,
    pool: &[ImageSample],
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<ImageSample>> {
    if pool.is_empty() {
        return Ok(Vec::new());
    }
    let preds = model.predict_samples(pool)?;
    let wrong: Vec<usize> = preds
        .iter()
        .zip(pool)
        .enumerate()
        .filter(|(_, (p, s))| p.label != s.label)
        .map(|(i, _)| i)
        .collect();
    if wrong.len() < n {
        warn!("only {} misclassified new-domain samples, {n} requested", wrong.len());
    }
    let take = n.min(wrong.len());
    Ok(index::sample(rng, wrong.len(), take)
        .into_iter()
        .map(|i| pool[wrong[i]].clone())
        .collect())
}

/// `softmax(f(x0))[y0]` through the running statistics.
pub fn judge_probability(model: &Model, x0: &ImageSample) -> Result<f64> {
    let mut shape = vec![1];
    shape.extend_from_slice(x0.image.shape());
    let logits = model.logits(x0.image.reshape(shape)?, StatsMode::Inference)?;
    Ok(crate::models::softmax(logits.data())[x0.label - 1])
}

/// True iff the model gives `x0`'s label probability above `delta`.
pub fn judge(model: &Model, x0: &ImageSample, delta: f64) -> Result<bool> {
    if x0.label == 0 || x0.label > model.spec().num_classes {
        return Err(invalid(format!("label {} outside 1..={}", x0.label, model.spec().num_classes)));
    }
    Ok(judge_probability(model, x0)? > delta)
}
