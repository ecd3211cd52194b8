//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and a
//! summary. A FAIL only fails the process with `ACCEPTANCE_STRICT=1`, so the
//! report stays part of an ordinary test run. The MNIST sweep dominates the
//! runtime.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use oneshot_dil::batchnorm::{StatsMode, StatsTrace};
use oneshot_dil::cli::{cmd_sweep, cmd_trace, prepare, ExperimentConfig};
use oneshot_dil::continual::{ewc_fisher, ewc_penalty, gem_project, ReplayBuffer};
use oneshot_dil::harness::{
    judge_probability, one_shot_dil, pick_new_samples, run_trials, Method, OneShotConfig, Termination,
    TrialContext,
};
use oneshot_dil::models::load_checkpoint;
use oneshot_dil::rng::SeedTree;
use oneshot_dil::tensor::gradcheck::{finite_diff_check, OpKind};
use oneshot_dil::tensor::Graph;
use rand::Rng as _;

type Verdict = Result<String, String>;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&configs().join(name)).expect("config loads");
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_gradients() -> Verdict {
    let mut rng = SeedTree::new(101).stream("fd");
    let mut worst = (0.0f64, OpKind::Linear);
    for kind in OpKind::ALL {
        for _ in 0..20 {
            let err = finite_diff_check(kind, &mut rng, 1e-6).map_err(|e| e.to_string())?;
            if !(err <= worst.0) {
                worst = (err, kind);
            }
        }
    }
    check(worst.0 < 1e-4, format!("max relative error {:.2e} ({:?})", worst.0, worst.1))
}

/// A base model with its buffer and one misclassified sample, from the synthetic config.
struct Bench {
    cfg: ExperimentConfig,
    base: oneshot_dil::models::Model,
    buffer: ReplayBuffer,
    x0: oneshot_dil::augment::ImageSample,
}

fn bench(cfg: ExperimentConfig) -> Bench {
    let p = prepare(&cfg).unwrap();
    let (base, _) = load_checkpoint(&cfg.checkpoint_path()).unwrap();
    let buffer = ReplayBuffer::from_pool(&p.domains.orig.train, cfg.one_shot.buffer_capacity, &mut p.seeds.stream("b"));
    let x0 = pick_new_samples(&base, &p.domains.new.train, 1, &mut p.seeds.stream("x")).unwrap().remove(0);
    Bench { cfg, base, buffer, x0 }
}

/// 100 full steps: δ = 1 can never be exceeded.
fn forced(b: &Bench, method: Method, mode: StatsMode) -> OneShotConfig {
    OneShotConfig { method, stats_mode: mode, delta: 1.0, max_iters: 100, ..b.cfg.one_shot.clone() }
}

fn c2_fixed_stats(b: &Bench) -> Verdict {
    let stored = load_checkpoint(&b.cfg.checkpoint_path()).unwrap().0.bn_stats_bytes();
    let fisher = ewc_fisher(&b.base, &b.buffer).unwrap();
    for method in Method::ALL {
        let cfg = forced(b, method, StatsMode::FixedStats);
        let (m, out) = one_shot_dil(&b.base, &b.buffer, &b.x0, &cfg, 1e-3, Some(&fisher), &mut SeedTree::new(2).stream("r"))
            .map_err(|e| e.to_string())?;
        if out.iters != 100 || m.bn_stats_bytes() != stored || m.params() == b.base.params() {
            return Err(format!("{method}: {} steps, statistics identical: {}", out.iters, m.bn_stats_bytes() == stored));
        }
    }
    Ok(format!("{} bytes identical after 100 steps for every method", stored.len()))
}

fn c3_gem(b: &Bench) -> Verdict {
    let mut rng = SeedTree::new(103).stream("gem");
    let mut worst = f64::INFINITY;
    for _ in 0..1000 {
        let g: Vec<f64> = (0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = gem_project(&g, &r).map_err(|e| e.to_string())?;
        let dot: f64 = p.grad.iter().zip(&r).map(|(a, b)| a * b).sum();
        worst = worst.min(dot);
        if p.raw_dot >= 0.0 && p.grad != g {
            return Err("nonnegative pair was modified".into());
        }
    }
    let mut steps = 0;
    let mut projected = 0;
    for mode in [StatsMode::UpdatedStats, StatsMode::FixedStats] {
        let cfg = forced(b, Method::CeGem, mode);
        let (_, out) = one_shot_dil(&b.base, &b.buffer, &b.x0, &cfg, 1e-3, None, &mut SeedTree::new(3).stream("r"))
            .map_err(|e| e.to_string())?;
        if out.gem.len() as u64 != out.iters {
            return Err(format!("{} GEM records for {} steps", out.gem.len(), out.iters));
        }
        for s in &out.gem {
            worst = worst.min(s.applied_dot);
            if s.raw_dot >= 0.0 && (s.projected || s.applied_dot != s.raw_dot) {
                return Err(format!("step {} altered a compatible gradient", s.step));
            }
        }
        steps += out.gem.len();
        projected += out.gem.iter().filter(|s| s.projected).count();
    }
    check(
        worst >= -1e-10,
        format!("min <g~, g_ref> {worst:.2e} over 1000 pairs and {steps} steps ({projected} projected)"),
    )
}

fn c4_ewc(b: &Bench) -> Verdict {
    let fisher = ewc_fisher(&b.base, &b.buffer).map_err(|e| e.to_string())?;
    let lambda = b.cfg.one_shot.ewc_lambda;
    let mut g = Graph::new();
    let pen = ewc_penalty(&mut g, &fisher.anchor, &fisher, lambda).unwrap();
    let grad = g.param_grads(pen, &fisher.anchor).unwrap().flatten();
    if g.value(pen).item() != 0.0 || grad.iter().any(|v| *v != 0.0) {
        return Err("nonzero penalty or gradient at the anchor".into());
    }
    let mut rng = SeedTree::new(104).stream("ewc");
    let (f, a) = (fisher.fisher.flatten(), fisher.anchor.flatten());
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let theta: Vec<f64> = a.iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect();
        let params = fisher.anchor.unflatten(&theta).unwrap();
        let mut g = Graph::new();
        let pen = ewc_penalty(&mut g, &params, &fisher, lambda).unwrap();
        let grad = g.param_grads(pen, &params).unwrap().flatten();
        for i in 0..theta.len() {
            worst = worst.max((grad[i] - lambda * f[i] * (theta[i] - a[i])).abs());
        }
    }
    check(worst <= 1e-10, format!("exact zero at anchor; max gradient deviation {worst:.2e} at 20 points"))
}

fn first_layer(t: &StatsTrace) -> (f64, f64, f64) {
    let recs: Vec<_> = t.layer(0).collect();
    let (first, last) = (recs.first().unwrap(), recs.last().unwrap());
    (last.running_var - first.running_var, last.running_mean, last.running_var)
}

fn std(values: &[f64]) -> f64 {
    let m = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

fn c5_c6_traces(cfg: &ExperimentConfig) -> (Verdict, Verdict) {
    let out = match cmd_trace(cfg) {
        Ok(o) => o,
        Err(e) => return (Err(e.to_string()), Err(e.to_string())),
    };
    let one: Vec<_> = out.one_shot.iter().map(first_layer).collect();
    let many: Vec<_> = out.many_shot.iter().map(first_layer).collect();
    let down = one.iter().filter(|r| r.0 < 0.0).count();
    let up = many.iter().filter(|r| r.0 > 0.0).count();
    let c5 = check(
        down >= 4 && up >= 4,
        format!("one-shot variance down in {down}/{}, many-shot up in {up}/{}", one.len(), many.len()),
    );
    let s1 = std(&one.iter().map(|r| r.1).collect::<Vec<_>>());
    let sm = std(&many.iter().map(|r| r.1).collect::<Vec<_>>());
    let c6 = check(s1 > sm, format!("final mean spread one-shot {s1:.3e} vs many-shot {sm:.3e}"));
    (c5, c6)
}

fn c7_sweep(cfg: &ExperimentConfig) -> (Verdict, Vec<oneshot_dil::harness::TrialRow>) {
    let out = match cmd_sweep(cfg) {
        Ok(o) => o,
        Err(e) => return (Err(e.to_string()), Vec::new()),
    };
    let mut failures = Vec::new();
    let mut lines = Vec::new();
    for regime in &cfg.sweep.regimes {
        for method in Method::ALL {
            let get = |mode| out.cell(method, mode, *regime).map(|c| &c.report);
            let (Some(fixed), Some(updated)) = (get(StatsMode::FixedStats), get(StatsMode::UpdatedStats)) else {
                failures.push(format!("{method} {regime:?}: cell missing"));
                continue;
            };
            let drop = out.base_acc_orig - fixed.acc_orig.median;
            let line = format!(
                "{method} |B|={} |C|={}: new fixed {:.3} vs updated {:.3}, orig drop {:.1}pp",
                regime.replay_batch,
                regime.copies,
                fixed.acc_new.median,
                updated.acc_new.median,
                100.0 * drop
            );
            if fixed.acc_new.median < updated.acc_new.median || drop > 0.05 {
                failures.push(line.clone());
            }
            lines.push(line);
        }
    }
    for l in &lines {
        println!("    {l}");
    }
    let rows = out.cells.iter().flat_map(|c| c.report.rows.clone()).collect();
    let verdict = if failures.is_empty() {
        Ok(format!("all {} method/regime pairs hold (base orig {:.4})", lines.len(), out.base_acc_orig))
    } else {
        Err(format!("{} of {} pairs fail: {}", failures.len(), lines.len(), failures.join("; ")))
    };
    (verdict, rows)
}

fn c8_judge(b: &Bench, sweep_rows: &[oneshot_dil::harness::TrialRow]) -> Verdict {
    let p = prepare(&b.cfg).unwrap();
    let fisher = ewc_fisher(&b.base, &b.buffer).unwrap();
    let picks = pick_new_samples(&b.base, &p.domains.new.train, 3, &mut p.seeds.stream("c8")).unwrap();
    let ctx = TrialContext {
        base: &b.base,
        buffer: &b.buffer,
        fisher: Some(&fisher),
        val_orig: &p.domains.orig.val,
        test_orig: &p.domains.orig.test,
        test_new: &p.domains.new.test,
    };
    let (mut converged, mut capped) = (0, 0);
    for method in Method::ALL {
        for mode in [StatsMode::UpdatedStats, StatsMode::FixedStats] {
            let cfg = OneShotConfig { method, stats_mode: mode, ..b.cfg.one_shot.clone() };
            let set = run_trials(&ctx, &picks, &cfg, &SeedTree::new(8)).map_err(|e| e.to_string())?;
            for (s, x0) in set.searches.iter().zip(&picks) {
                for pt in &s.points {
                    match pt.termination {
                        Some(Termination::Converged) if pt.final_prob > cfg.delta && pt.iters <= 100 => converged += 1,
                        Some(Termination::IterationCap) if pt.iters == 100 => capped += 1,
                        None => {}
                        _ => return Err(format!("{method} {mode}: grid point {pt:?} breaks the contract")),
                    }
                }
                let prob = judge_probability(&s.model, x0).unwrap();
                let conv = s.outcome.termination == Termination::Converged;
                if conv != (prob > 0.99) || (!conv && s.outcome.iters != 100) {
                    return Err(format!("{method} {mode}: kept run reports {:?} at p = {prob}", s.outcome.termination));
                }
            }
        }
    }
    for r in sweep_rows {
        let ok = match r.terminated {
            Termination::Converged => r.iters <= 100,
            Termination::IterationCap => r.iters == 100,
        };
        if !ok {
            return Err(format!("sweep row {r:?} breaks the contract"));
        }
    }
    Ok(format!("{converged} converged and {capped} capped grid runs, {} sweep rows", sweep_rows.len()))
}

const TINY: &str = r#"
seed = 5
output_dir = "out"

[dataset]
source = "synthetic"
image_size = 8
samples_per_class = 150
pixel_noise = 0.02
blob_width = 0.2
classes = [
  { mean = [0.8, 0.0, 0.0], std = [0.05, 0.0, 0.0] },
  { mean = [0.0, 0.8, 0.0], std = [0.0, 0.05, 0.0] },
  { mean = [0.0, 0.8, 0.4], std = [0.0, 0.05, 0.05] },
]

[domain]
new_class = 2
absorbing_class = 0

[model]
kind = "small_cnn"
channels = [4, 4]

[base]
epochs = 10

[one_shot]
lr_grid = [1e-1, 1e-2, 1e-3]
buffer_capacity = 100

[trials]
samples = 3

[trace]
pool_size = 60
steps = 20
"#;

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c9_determinism(dir: &Path) -> Verdict {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let mut runs = Vec::new();
    for round in 0..2 {
        let out = dir.join(format!("run{round}"));
        for cmd in ["train-base", "one-shot", "sweep", "trace"] {
            let status = Command::new(env!("CARGO_BIN_EXE_oneshot-dil"))
                .arg(cmd)
                .arg(&cfg)
                .env("ONESHOT_DIL_OUT", &out)
                .env("RUST_LOG", "warn")
                .status()
                .unwrap();
            if !status.success() {
                return Err(format!("{cmd} exited with {status}"));
            }
        }
        runs.push(snapshot(&out));
    }
    let bytes: usize = runs[0].iter().map(|(_, b)| b.len()).sum();
    check(runs[0] == runs[1], format!("{} files, {bytes} bytes compared across two runs", runs[0].len()))
}

fn main() {
    // libtest passes flags such as `--list` or a filter; this target has one entry.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let mut verdicts: Vec<(usize, Verdict)> = Vec::new();
    let mut record = |n: usize, v: Verdict, t: Instant| {
        let secs = t.elapsed().as_secs_f64();
        match &v {
            Ok(d) => println!("PASS criterion {n}: {d} [{secs:.1}s]"),
            Err(d) => println!("FAIL criterion {n}: {d} [{secs:.1}s]"),
        }
        verdicts.push((n, v));
    };

    let t = Instant::now();
    record(1, c1_gradients(), t);

    // Trace runs train the synthetic base model and leave its checkpoint behind.
    let t = Instant::now();
    let synth = load("variance_collapse.toml", &tmp.path().join("synthetic"));
    let (c5, c6) = c5_c6_traces(&synth);
    let b = bench(synth);
    let t2 = Instant::now();
    record(2, c2_fixed_stats(&b), t2);
    let t3 = Instant::now();
    record(3, c3_gem(&b), t3);
    let t4 = Instant::now();
    record(4, c4_ewc(&b), t4);
    record(5, c5, t);
    record(6, c6, t);

    let t = Instant::now();
    let (c7, rows) = c7_sweep(&load("mnist_set2.toml", &tmp.path().join("mnist")));
    record(7, c7, t);

    let t = Instant::now();
    record(8, c8_judge(&b, &rows), t);

    let t = Instant::now();
    record(9, c9_determinism(tmp.path()), t);

    let failed: Vec<usize> = verdicts.iter().filter(|(_, v)| v.is_err()).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all 9 criteria pass");
        return;
    }
    println!("acceptance: failed criteria {failed:?}");
    if std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
