//! Records how the first batch-norm layer's running statistics move while a
//! model keeps training on one augmented sample versus many distinct ones.

use oneshot_dil::batchnorm::{StatsMode, StatsTrace};
use oneshot_dil::continual::ReplayBuffer;
use oneshot_dil::data::{gen_synthetic, ClassSpec, SyntheticSpec};
use oneshot_dil::harness::{
    many_shot_dil, one_shot_dil, pick_new_samples, split_domains, train_base, BaseTrainConfig, DomainSpec,
    OneShotConfig,
};
use oneshot_dil::models::{Model, ModelSpec};
use oneshot_dil::rng::SeedTree;

fn summary(name: &str, t: &StatsTrace) {
    let recs: Vec<_> = t.layer(0).collect();
    let (a, b) = (recs[0], recs[recs.len() - 1]);
    println!(
        "{name}: mean {:.4} -> {:.4}, variance {:.4} -> {:.4} over {} passes",
        a.running_mean,
        b.running_mean,
        a.running_var,
        b.running_var,
        recs.len()
    );
}

fn main() -> oneshot_dil::Result<()> {
    let seeds = SeedTree::new(5);
    let class = |mean: Vec<f64>, std: Vec<f64>| ClassSpec { mean, covariance: None, std: Some(std) };
    let spec = SyntheticSpec {
        image_size: 8,
        samples_per_class: 300,
        classes: vec![
            class(vec![0.6, 0.0, 0.0], vec![0.1, 0.0, 0.0]),
            class(vec![0.0, 0.6, 0.0], vec![0.0, 0.1, 0.0]),
            class(vec![0.2, 0.0, 0.4], vec![0.6, 0.0, 0.05]),
        ],
        background: 0.0,
        pixel_noise: 0.05,
        blob_width: 0.2,
        uniform_patterns: 0,
    };
    let data = gen_synthetic(&spec, &mut seeds.stream("data"))?;
    let d = split_domains(&data, &DomainSpec::new(2, 0), &mut seeds.stream("split"))?;
    let mut base = Model::build(&ModelSpec::small_cnn([1, 8, 8], &[4, 4], d.num_classes), &mut seeds.stream("init"))?;
    train_base(&mut base, &d.orig.train, &BaseTrainConfig { epochs: 8, ..Default::default() }, &mut seeds.stream("t"))?;

    let buf = ReplayBuffer::from_pool(&d.orig.train, 300, &mut seeds.stream("buffer"));
    let pool = ReplayBuffer::from_pool(&d.new.train, 200, &mut seeds.stream("pool"));
    // δ = 1 keeps every run going for the full step budget.
    let cfg = OneShotConfig { stats_mode: StatsMode::UpdatedStats, delta: 1.0, max_iters: 100, ..Default::default() };
    let x0 = pick_new_samples(&base, &d.new.train, 1, &mut seeds.stream("pick"))?.remove(0);

    let (_, one) = one_shot_dil(&base, &buf, &x0, &cfg, 1e-5, None, &mut seeds.stream("one"))?;
    let (_, many) = many_shot_dil(&base, &buf, &pool, &cfg, 1e-5, None, &mut seeds.stream("many"))?;
    summary("one sample, 32 copies  ", &one.trace);
    summary("200 distinct new images", &many.trace);

    let mut csv = Vec::new();
    one.trace.write_csv(&mut csv)?;
    println!("first rows of the trace CSV:");
    for line in String::from_utf8_lossy(&csv).lines().take(4) {
        println!("  {line}");
    }
    Ok(())
}
