use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::report::TrialRow;
use super::{evaluate, judge_probability};
use crate::augment::{AugmentConfig, ImageSample};
use crate::batchnorm::{StatsMode, StatsTrace};
use crate::continual::{
    compose_from_pool, compose_minibatch, ewc_penalty, gem_project, gem_reference_gradient, FisherDiag,
    MiniBatch, ReplayBuffer,
};
use crate::error::{invalid, Error, Result};
use crate::models::{loss_ce, Model};
use crate::optim::{AdamConfig, OptState};
use crate::rng::{Rng, SeedTree};
use crate::tensor::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "ce+ewc")]
    CeEwc,
    #[serde(rename = "ce+gem")]
    CeGem,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ce, Method::CeEwc, Method::CeGem];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ce => "ce",
            Method::CeEwc => "ce+ewc",
            Method::CeGem => "ce+gem",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown method `{s}` (expected ce, ce+ewc or ce+gem)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    IterationCap,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::IterationCap => "iteration_cap",
        }
    }
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Settings of the incremental phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneShotConfig {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_mode")]
    pub stats_mode: StatsMode,
    /// Replayed original-domain samples per mini-batch (|B|).
    #[serde(default = "default_replay")]
    pub replay_batch: usize,
    /// Augmented copies of the new sample per mini-batch (|C|).
    #[serde(default = "default_copies")]
    pub copies: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: u64,
    #[serde(default = "default_lr_grid")]
    pub lr_grid: Vec<f64>,
    #[serde(default = "default_capacity")]
    pub buffer_capacity: usize,
    #[serde(default = "default_lambda")]
    pub ewc_lambda: f64,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_method() -> Method {
    Method::Ce
}

fn default_mode() -> StatsMode {
    StatsMode::FixedStats
}

fn default_replay() -> usize {
    32
}

fn default_copies() -> usize {
    32
}

fn default_delta() -> f64 {
    0.99
}

fn default_max_iters() -> u64 {
    100
}

fn default_lr_grid() -> Vec<f64> {
    (1..=8).rev().map(|e| 10f64.powi(-e)).collect()
}

fn default_capacity() -> usize {
    1000
}

fn default_lambda() -> f64 {
    100.0
}

impl Default for OneShotConfig {
    fn default() -> Self {
        Self {
            method: default_method(),
            stats_mode: default_mode(),
            replay_batch: default_replay(),
            copies: default_copies(),
            delta: default_delta(),
            max_iters: default_max_iters(),
            lr_grid: default_lr_grid(),
            buffer_capacity: default_capacity(),
            ewc_lambda: default_lambda(),
            augment: AugmentConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl OneShotConfig {
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut bad = |k: &str, m: &str| out.push((k.to_string(), m.to_string()));
        if self.stats_mode == StatsMode::Inference {
            bad("stats_mode", "training needs updated-stats or fixed-stats");
        }
        if self.copies == 0 {
            bad("copies", "must be at least 1");
        }
        if self.stats_mode == StatsMode::UpdatedStats && self.replay_batch + self.copies < 2 {
            bad("replay_batch", "updated-stats needs a mini-batch of at least 2");
        }
        if !(0.0..=1.0).contains(&self.delta) {
            bad("delta", "must lie in [0, 1]");
        }
        if self.max_iters == 0 {
            bad("max_iters", "must be at least 1");
        }
        if self.lr_grid.is_empty() {
            bad("lr_grid", "must not be empty");
        }
        if self.lr_grid.iter().any(|lr| !(lr.is_finite() && *lr >= 0.0)) {
            bad("lr_grid", "entries must be finite and nonnegative");
        }
        if self.buffer_capacity == 0 {
            bad("buffer_capacity", "must be at least 1");
        }
        if self.replay_batch > self.buffer_capacity {
            bad("replay_batch", "cannot exceed buffer_capacity");
        }
        if !(self.ewc_lambda.is_finite() && self.ewc_lambda >= 0.0) {
            bad("ewc_lambda", "must be finite and nonnegative");
        }
        for (k, m) in self.augment.problems() {
            out.push((format!("augment.{k}"), m));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().into_iter().next() {
            Some((k, m)) => Err(invalid(format!("one-shot `{k}` {m}"))),
            None => Ok(()),
        }
    }
}

/// Inner products seen by one GEM-projected step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GemStep {
    pub step: u64,
    /// `⟨g, g_ref⟩` before projection.
    pub raw_dot: f64,
    /// `⟨g̃, g_ref⟩` of the applied gradient.
    pub applied_dot: f64,
    pub projected: bool,
}

/// Result of one incremental run at a fixed learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub lr: f64,
    /// Optimizer steps taken.
    pub iters: u64,
    pub termination: Termination,
    /// `softmax(f(x0))[y0]` at the final parameters (NaN without a target).
    pub final_prob: f64,
    /// Running statistics after every forward pass, step 0 being the start.
    pub trace: StatsTrace,
    pub gem: Vec<GemStep>,
}

enum NewSource<'a> {
    Copies(&'a ImageSample),
    Pool(&'a ReplayBuffer),
}

fn compose(
    buf: &ReplayBuffer,
    source: &NewSource<'_>,
    cfg: &OneShotConfig,
    rng: &mut Rng,
) -> Result<MiniBatch> {
    let sizes = (cfg.replay_batch, cfg.copies);
    match source {
        NewSource::Copies(x0) => compose_minibatch(buf, x0, sizes, &cfg.augment, rng),
        NewSource::Pool(pool) => compose_from_pool(buf, pool, sizes, rng),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_incremental(
    base: &Model,
    buf: &ReplayBuffer,
    source: NewSource<'_>,
    target: Option<&ImageSample>,
    cfg: &OneShotConfig,
    lr: f64,
    fisher: Option<&FisherDiag>,
    rng: &mut Rng,
) -> Result<(Model, RunOutcome)> {
    cfg.validate()?;
    let fisher = match (cfg.method, fisher) {
        (Method::CeEwc, None) => return Err(invalid("CE+EWC needs a Fisher estimate")),
        (_, f) => f,
    };
    let mode = cfg.stats_mode;
    let mut model = base.clone();
    model.set_mode(mode);
    let mut opt = OptState::adam(model.params(), cfg.adam);
    let mut trace = StatsTrace::new();
    trace.record(0, model.bn_states())?;
    let mut gem = Vec::new();
    let mut t = 0u64;
    let termination = loop {
        if let Some(x0) = target {
            if judge_probability(&model, x0)? > cfg.delta {
                break Termination::Converged;
            }
        }
        if t == cfg.max_iters {
            break Termination::IterationCap;
        }
        let batch = compose(buf, &source, cfg, rng)?;
        let mut g = Graph::new();
        let mut loss = loss_ce(&mut model, &mut g, &batch.samples, mode)?;
        if let (Method::CeEwc, Some(f)) = (cfg.method, fisher) {
            let penalty = ewc_penalty(&mut g, model.params(), f, cfg.ewc_lambda)?;
            loss = g.add(loss, penalty)?;
        }
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged(format!("step {t}: loss is {value}")));
        }
        let mut grads = g.param_grads(loss, model.params())?;
        if cfg.method == Method::CeGem {
            let g_ref = gem_reference_gradient(&model, buf, cfg.replay_batch, mode, rng)?;
            let proj = gem_project(&grads.flatten(), &g_ref)?;
            let applied_dot = proj.grad.iter().zip(&g_ref).map(|(a, b)| a * b).sum();
            gem.push(GemStep { step: t, raw_dot: proj.raw_dot, applied_dot, projected: proj.projected });
            grads = grads.unflatten(&proj.grad)?;
        }
        opt.step(model.params_mut(), &grads, lr)?;
        t += 1;
        trace.record(t, model.bn_states())?;
    };
    let final_prob = match target {
        Some(x0) => judge_probability(&model, x0)?,
        None => f64::NAN,
    };
    Ok((model, RunOutcome { lr, iters: t, termination, final_prob, trace, gem }))
}

/// The one-shot incremental loop: mini-batches of replayed samples and
/// augmented copies of `x0`, Adam at a fixed `lr`, stopping as soon as the
/// judge accepts or after `cfg.max_iters` steps. Rejects an `x0` the base
/// model already accepts.
pub fn one_shot_dil(
    base: &Model,
    buf: &ReplayBuffer,
    x0: &ImageSample,
    cfg: &OneShotConfig,
    lr: f64,
    fisher: Option<&FisherDiag>,
    rng: &mut Rng,
) -> Result<(Model, RunOutcome)> {
    if super::judge(base, x0, cfg.delta)? {
        return Err(invalid("the base model already accepts x0; nothing to learn"));
    }
    run_incremental(base, buf, NewSource::Copies(x0), Some(x0), cfg, lr, fisher, rng)
}

/// Comparison regime: the new-domain half of every mini-batch is `copies`
/// distinct samples from `pool`. Runs exactly `cfg.max_iters` steps.
pub fn many_shot_dil(
    base: &Model,
    buf: &ReplayBuffer,
    pool: &ReplayBuffer,
    cfg: &OneShotConfig,
    lr: f64,
    fisher: Option<&FisherDiag>,
    rng: &mut Rng,
) -> Result<(Model, RunOutcome)> {
    run_incremental(base, buf, NewSource::Pool(pool), None, cfg, lr, fisher, rng)
}

/// One learning rate of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub iters: u64,
    /// `None` when the run diverged.
    pub termination: Option<Termination>,
    pub final_prob: f64,
    /// Original-domain validation accuracy, for converged runs only.
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSearch {
    /// Index into `points`.
    pub chosen: usize,
    pub points: Vec<GridPoint>,
    pub model: Model,
    pub outcome: RunOutcome,
    /// No grid point converged; the closest run was kept instead.
    pub non_terminating: bool,
}

/// Runs [`one_shot_dil`] from the base model at every grid point. Among
/// converged runs the best original-domain validation accuracy wins (ties go
/// to the smaller rate); without any, the run with the highest final
/// probability is returned and flagged. Diverged runs are recorded and
/// skipped. Grid point `i` draws from `seeds.child_indexed("lr", i)`.
pub fn lr_search(
    base: &Model,
    buf: &ReplayBuffer,
    x0: &ImageSample,
    cfg: &OneShotConfig,
    fisher: Option<&FisherDiag>,
    val: &[ImageSample],
    seeds: &SeedTree,
) -> Result<LrSearch> {
    cfg.validate()?;
    let mut points = Vec::with_capacity(cfg.lr_grid.len());
    // (index, score, lr) of the best candidate so far, plus its model.
    let mut best_conv: Option<(usize, f64, f64, Model, RunOutcome)> = None;
    let mut best_open: Option<(usize, f64, f64, Model, RunOutcome)> = None;
    for (i, &lr) in cfg.lr_grid.iter().enumerate() {
        let mut rng = seeds.child_indexed("lr", i as u64).stream("dil");
        let (model, outcome) = match one_shot_dil(base, buf, x0, cfg, lr, fisher, &mut rng) {
            Ok(r) => r,
            Err(Error::Diverged(msg)) => {
                log::warn!("lr {lr} diverged: {msg}");
                points.push(GridPoint { lr, iters: 0, termination: None, final_prob: f64::NAN, val_acc: None });
                continue;
            }
            Err(e) => return Err(e),
        };
        let converged = outcome.termination == Termination::Converged;
        let val_acc = if converged { Some(evaluate(&model, val)?) } else { None };
        points.push(GridPoint {
            lr,
            iters: outcome.iters,
            termination: Some(outcome.termination),
            final_prob: outcome.final_prob,
            val_acc,
        });
        let (slot, score) = match val_acc {
            Some(acc) => (&mut best_conv, acc),
            None => (&mut best_open, outcome.final_prob),
        };
        let better = match slot {
            None => true,
            Some((_, s, l, _, _)) => score > *s || (score == *s && lr < *l),
        };
        if better {
            *slot = Some((i, score, lr, model, outcome));
        }
    }
    let non_terminating = best_conv.is_none();
    match best_conv.or(best_open) {
        Some((chosen, _, _, model, outcome)) => Ok(LrSearch { chosen, points, model, outcome, non_terminating }),
        None => Err(Error::Diverged("every learning rate in the grid diverged".into())),
    }
}

/// Per-trial rows and searches of one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub rows: Vec<TrialRow>,
    pub searches: Vec<LrSearch>,
}

/// Data shared by every trial of a configuration.
pub struct TrialContext<'a> {
    pub base: &'a Model,
    pub buffer: &'a ReplayBuffer,
    pub fisher: Option<&'a FisherDiag>,
    pub val_orig: &'a [ImageSample],
    pub test_orig: &'a [ImageSample],
    pub test_new: &'a [ImageSample],
}

/// Learning-rate search and test evaluation for each new sample. Trial `i`
/// draws from `seeds.child_indexed("trial", i)`, so equal seeds pair trials
/// across configurations.
pub fn run_trials(
    ctx: &TrialContext<'_>,
    new_samples: &[ImageSample],
    cfg: &OneShotConfig,
    seeds: &SeedTree,
) -> Result<TrialSet> {
    let mut rows = Vec::with_capacity(new_samples.len());
    let mut searches = Vec::with_capacity(new_samples.len());
    for (i, x0) in new_samples.iter().enumerate() {
        let trial_seeds = seeds.child_indexed("trial", i as u64);
        let search = lr_search(ctx.base, ctx.buffer, x0, cfg, ctx.fisher, ctx.val_orig, &trial_seeds)?;
        rows.push(TrialRow {
            trial: i,
            method: cfg.method,
            stats_mode: cfg.stats_mode,
            lr: search.outcome.lr,
            iters: search.outcome.iters,
            terminated: search.outcome.termination,
            acc_new: evaluate(&search.model, ctx.test_new)?,
            acc_orig: evaluate(&search.model, ctx.test_orig)?,
        });
        searches.push(search);
    }
    Ok(TrialSet { rows, searches })
}
