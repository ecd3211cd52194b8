use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use log::info;
use serde::Serialize;

use super::{DatasetSource, ExperimentConfig, Regime};
use crate::augment::ImageSample;
use crate::batchnorm::{StatsMode, StatsTrace};
use crate::continual::{ewc_fisher, FisherDiag, ReplayBuffer};
use crate::data::{gen_synthetic, load_idx};
use crate::error::{Error, Result};
use crate::harness::{
    aggregate, evaluate, many_shot_dil, one_shot_dil, pick_new_samples, run_trials, split_domains,
    train_base, Domains, Method, OneShotConfig, RunReport, Stat, TrialContext,
};
use crate::models::{load_checkpoint, save_checkpoint, Architecture, Model, ModelSpec};
use crate::rng::SeedTree;

pub const CHECKPOINT_FILE: &str = "base.ckpt";
pub const BASE_JSON: &str = "base_summary.json";
pub const ONE_SHOT_CSV: &str = "one_shot_trials.csv";
pub const ONE_SHOT_JSON: &str = "one_shot_summary.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_JSON: &str = "sweep_summary.json";
pub const TRACE_DIR: &str = "trace";

/// Dataset split into domains, plus the model spec that fits it.
pub struct Prepared {
    pub domains: Domains,
    pub spec: ModelSpec,
    pub seeds: SeedTree,
}

/// Loads or generates the dataset and builds both domains.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let seeds = SeedTree::new(cfg.seed);
    let dataset = match &cfg.dataset {
        DatasetSource::Idx { images, labels } => load_idx(images, labels)?,
        DatasetSource::Synthetic(spec) => gen_synthetic(spec, &mut seeds.stream("dataset"))?,
    };
    let domains = split_domains(&dataset, &cfg.domain, &mut seeds.stream("split"))?;
    let first = domains
        .orig
        .train
        .first()
        .ok_or_else(|| Error::InvalidArgument("original-domain training split is empty".into()))?;
    let input_shape = match cfg.model {
        Architecture::Mlp { .. } => vec![first.image.numel()],
        Architecture::SmallCnn { .. } => first.image.shape().to_vec(),
    };
    let spec = ModelSpec { architecture: cfg.model.clone(), input_shape, num_classes: domains.num_classes };
    spec.validate()?;
    Ok(Prepared { domains, spec, seeds })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaseReport {
    pub epoch_loss: Vec<f64>,
    pub acc_orig: f64,
    pub acc_new: f64,
    pub parameters: usize,
}

/// Trains the base model and writes its checkpoint and summary.
pub fn cmd_train_base(cfg: &ExperimentConfig) -> Result<BaseReport> {
    let p = prepare(cfg)?;
    let (_, report) = train_and_save(cfg, &p)?;
    Ok(report)
}

fn train_and_save(cfg: &ExperimentConfig, p: &Prepared) -> Result<(Model, BaseReport)> {
    let mut model = Model::build(&p.spec, &mut p.seeds.stream("init"))?;
    info!(
        "training {} parameters on {} samples for {} epochs",
        model.num_parameters(),
        p.domains.orig.train.len(),
        cfg.base.epochs
    );
    let summary = train_base(&mut model, &p.domains.orig.train, &cfg.base, &mut p.seeds.stream("base"))?;
    let report = BaseReport {
        epoch_loss: summary.epoch_loss.clone(),
        acc_orig: evaluate(&model, &p.domains.orig.test)?,
        acc_new: evaluate(&model, &p.domains.new.test)?,
        parameters: model.num_parameters(),
    };
    info!("base accuracy: original {:.4}, new {:.4}", report.acc_orig, report.acc_new);
    let path = cfg.checkpoint_path();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(&path, &model, Some(&summary.optimizer))?;
    write_json(&cfg.output_dir, BASE_JSON, &report)?;
    Ok((model, report))
}

/// The checkpointed base model. Without a checkpoint it is trained first
/// when `train_missing` is set, and an error otherwise.
fn base_model(cfg: &ExperimentConfig, p: &Prepared, train_missing: bool) -> Result<Model> {
    let path = cfg.checkpoint_path();
    if !path.exists() {
        if train_missing {
            return Ok(train_and_save(cfg, p)?.0);
        }
        return Err(Error::Checkpoint(format!(
            "no base checkpoint at {}; run train-base first",
            path.display()
        )));
    }
    let (model, _) = load_checkpoint(&path)?;
    if model.spec() != &p.spec {
        return Err(Error::Checkpoint(format!(
            "{} was trained for a different model or dataset",
            path.display()
        )));
    }
    Ok(model)
}

/// Everything the incremental runs of one command share.
struct Session {
    p: Prepared,
    base: Model,
    buffer: ReplayBuffer,
    fisher: Option<FisherDiag>,
}

impl Session {
    fn open(cfg: &ExperimentConfig, train_missing: bool) -> Result<Self> {
        let p = prepare(cfg)?;
        let base = base_model(cfg, &p, train_missing)?;
        let buffer = ReplayBuffer::from_pool(
            &p.domains.orig.train,
            cfg.one_shot.buffer_capacity,
            &mut p.seeds.stream("buffer"),
        );
        Ok(Self { p, base, buffer, fisher: None })
    }

    fn picks(&self, n: usize, stream: &str) -> Result<Vec<ImageSample>> {
        let picks = pick_new_samples(&self.base, &self.p.domains.new.train, n, &mut self.p.seeds.stream(stream))?;
        if picks.is_empty() {
            return Err(Error::InvalidArgument(
                "the base model classifies every new-domain training sample correctly".into(),
            ));
        }
        Ok(picks)
    }

    /// Fisher estimate, computed on first use.
    fn fisher(&mut self) -> Result<&FisherDiag> {
        if self.fisher.is_none() {
            self.fisher = Some(ewc_fisher(&self.base, &self.buffer)?);
        }
        Ok(self.fisher.as_ref().expect("just set"))
    }

    fn run(&mut self, picks: &[ImageSample], cell: &OneShotConfig) -> Result<RunReport> {
        if cell.method == Method::CeEwc {
            self.fisher()?;
        }
        let d = &self.p.domains;
        let ctx = TrialContext {
            base: &self.base,
            buffer: &self.buffer,
            fisher: self.fisher.as_ref(),
            val_orig: &d.orig.val,
            test_orig: &d.orig.test,
            test_new: &d.new.test,
        };
        let set = run_trials(&ctx, picks, cell, &self.p.seeds.child("trials"))?;
        aggregate(&set.rows)
    }
}

/// Learning-rate search and test evaluation for each misclassified sample
/// under `cfg.one_shot`. Needs the base checkpoint.
pub fn cmd_one_shot(cfg: &ExperimentConfig) -> Result<RunReport> {
    let mut s = Session::open(cfg, false)?;
    let picks = s.picks(cfg.trials.samples, "pick")?;
    let report = s.run(&picks, &cfg.one_shot)?;
    let mut w = create(&cfg.output_dir, ONE_SHOT_CSV)?;
    report.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&cfg.output_dir, ONE_SHOT_JSON)?;
    report.write_summary_json(&mut w)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub regime: Regime,
    pub report: RunReport,
}

impl SweepCell {
    pub fn method(&self) -> Method {
        self.report.method()
    }

    pub fn stats_mode(&self) -> StatsMode {
        self.report.stats_mode()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub base_acc_orig: f64,
    pub base_acc_new: f64,
    pub cells: Vec<SweepCell>,
}

impl SweepOutput {
    pub fn cell(&self, method: Method, mode: StatsMode, regime: Regime) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.method() == method && c.stats_mode() == mode && c.regime == regime)
    }
}

const SWEEP_HEADER: [&str; 14] = [
    "row", "method", "stats_mode", "replay_batch", "copies", "trial", "lr", "iters", "terminated",
    "acc_new", "acc_orig", "acc_new_std", "acc_orig_std", "converged",
];

fn write_sweep_csv<W: Write>(out: W, cells: &[SweepCell]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_HEADER)?;
    let prefix = |c: &SweepCell, kind: &str| {
        vec![
            kind.to_string(),
            c.method().to_string(),
            c.stats_mode().to_string(),
            c.regime.replay_batch.to_string(),
            c.regime.copies.to_string(),
        ]
    };
    for c in cells {
        let r = &c.report;
        let mut rec = prefix(c, "aggregate");
        rec.extend([
            String::new(),
            String::new(),
            r.iters.median.to_string(),
            String::new(),
            r.acc_new.median.to_string(),
            r.acc_orig.median.to_string(),
            r.acc_new.std.to_string(),
            r.acc_orig.std.to_string(),
            format!("{}/{}", r.converged, r.rows.len()),
        ]);
        w.write_record(&rec)?;
    }
    for c in cells {
        for t in &c.report.rows {
            let mut rec = prefix(c, "trial");
            let f = t.fields();
            // trial, lr, iters, terminated, acc_new, acc_orig
            rec.extend([f[0].clone(), f[3].clone(), f[4].clone(), f[5].clone(), f[6].clone(), f[7].clone()]);
            rec.extend([String::new(), String::new(), String::new()]);
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct CellSummary {
    method: Method,
    stats_mode: StatsMode,
    replay_batch: usize,
    copies: usize,
    trials: usize,
    converged: usize,
    acc_new: Stat,
    acc_orig: Stat,
    iters: Stat,
}

#[derive(Serialize)]
struct SweepSummary {
    base_acc_orig: f64,
    base_acc_new: f64,
    cells: Vec<CellSummary>,
}

/// Runs every (regime, method, statistics mode) cell on the same
/// misclassified samples with the same trial seeds, so cells are paired.
/// Trains the base model first if no checkpoint exists.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<SweepOutput> {
    let mut s = Session::open(cfg, true)?;
    let picks = s.picks(cfg.trials.samples, "pick")?;
    let base_acc_orig = evaluate(&s.base, &s.p.domains.orig.test)?;
    let base_acc_new = evaluate(&s.base, &s.p.domains.new.test)?;
    let mut cells = Vec::new();
    for &regime in &cfg.sweep.regimes {
        for &method in &cfg.sweep.methods {
            for &stats_mode in &cfg.sweep.stats_modes {
                let cell = OneShotConfig {
                    method,
                    stats_mode,
                    replay_batch: regime.replay_batch,
                    copies: regime.copies,
                    ..cfg.one_shot.clone()
                };
                let report = s.run(&picks, &cell)?;
                info!(
                    "{method} {stats_mode} |B|={} |C|={}: acc new {:.4}, orig {:.4}, {}/{} converged",
                    regime.replay_batch,
                    regime.copies,
                    report.acc_new.median,
                    report.acc_orig.median,
                    report.converged,
                    report.rows.len()
                );
                cells.push(SweepCell { regime, report });
            }
        }
    }
    let mut w = create(&cfg.output_dir, SWEEP_CSV)?;
    write_sweep_csv(&mut w, &cells)?;
    w.flush()?;
    let summary = SweepSummary {
        base_acc_orig,
        base_acc_new,
        cells: cells
            .iter()
            .map(|c| CellSummary {
                method: c.method(),
                stats_mode: c.stats_mode(),
                replay_batch: c.regime.replay_batch,
                copies: c.regime.copies,
                trials: c.report.rows.len(),
                converged: c.report.converged,
                acc_new: c.report.acc_new,
                acc_orig: c.report.acc_orig,
                iters: c.report.iters,
            })
            .collect(),
    };
    write_json(&cfg.output_dir, SWEEP_JSON, &summary)?;
    Ok(SweepOutput { base_acc_orig, base_acc_new, cells })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceOutput {
    pub one_shot: Vec<StatsTrace>,
    pub many_shot: Vec<StatsTrace>,
}

/// Running-statistics traces: `trace.trials` one-shot runs, each on a
/// different misclassified sample, and as many many-shot runs, each on a
/// different draw of `trace.pool_size` new-domain samples. Writes
/// `trace/one_shot_<i>.csv` and `trace/many_shot_<i>.csv`, counting from 1.
pub fn cmd_trace(cfg: &ExperimentConfig) -> Result<TraceOutput> {
    let s = Session::open(cfg, true)?;
    let t = &cfg.trace;
    let run_cfg = OneShotConfig {
        method: Method::Ce,
        stats_mode: t.stats_mode,
        max_iters: t.steps,
        // No probability exceeds 1, so every run takes all `steps` updates.
        delta: 1.0,
        ..cfg.one_shot.clone()
    };
    let picks = s.picks(t.trials, "trace-pick")?;
    if picks.len() < t.trials {
        return Err(Error::InvalidArgument(format!(
            "only {} misclassified new-domain samples for {} trace trials",
            picks.len(),
            t.trials
        )));
    }
    let dir = cfg.output_dir.join(TRACE_DIR);
    let mut out = TraceOutput { one_shot: Vec::new(), many_shot: Vec::new() };
    for (i, x0) in picks.iter().enumerate() {
        let seeds = s.p.seeds.child_indexed("trace-one", i as u64);
        let (_, run) = one_shot_dil(&s.base, &s.buffer, x0, &run_cfg, t.lr, None, &mut seeds.stream("dil"))?;
        let mut w = create(&dir, &format!("one_shot_{}.csv", i + 1))?;
        run.trace.write_csv(&mut w)?;
        w.flush()?;
        out.one_shot.push(run.trace);
    }
    for i in 0..t.trials {
        let seeds = s.p.seeds.child_indexed("trace-many", i as u64);
        let pool = ReplayBuffer::from_pool(&s.p.domains.new.train, t.pool_size, &mut seeds.stream("pool"));
        if pool.len() < t.pool_size {
            log::warn!("many-shot pool holds {} samples, {} requested", pool.len(), t.pool_size);
        }
        let (_, run) = many_shot_dil(&s.base, &s.buffer, &pool, &run_cfg, t.lr, None, &mut seeds.stream("dil"))?;
        let mut w = create(&dir, &format!("many_shot_{}.csv", i + 1))?;
        run.trace.write_csv(&mut w)?;
        w.flush()?;
        out.many_shot.push(run.trace);
    }
    Ok(out)
}
