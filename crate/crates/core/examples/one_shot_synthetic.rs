//! The full one-shot loop on synthetic blobs: train a base model, pick a
//! misclassified new-domain sample, search the learning rate and compare
//! accuracies before and after, under both statistics modes.

use oneshot_dil::batchnorm::StatsMode;
use oneshot_dil::continual::ReplayBuffer;
use oneshot_dil::data::{gen_synthetic, ClassSpec, SyntheticSpec};
use oneshot_dil::harness::{
    evaluate, lr_search, pick_new_samples, split_domains, train_base, BaseTrainConfig, DomainSpec, OneShotConfig,
};
use oneshot_dil::models::{Model, ModelSpec};
use oneshot_dil::rng::SeedTree;

fn blob(k: usize, amp: f64, extra: Option<(usize, f64)>) -> ClassSpec {
    let mut mean = vec![0.0; 4];
    let mut std = vec![0.0; 4];
    mean[k] = amp;
    std[k] = 0.05;
    if let Some((j, a)) = extra {
        mean[j] = a;
        std[j] = 0.05;
    }
    ClassSpec { mean, covariance: None, std: Some(std) }
}

fn main() -> oneshot_dil::Result<()> {
    let seeds = SeedTree::new(11);
    // Class 3 is the new domain: it shares class 0's label but looks like class 1.
    let spec = SyntheticSpec {
        image_size: 8,
        samples_per_class: 200,
        classes: vec![blob(0, 0.8, None), blob(1, 0.8, None), blob(2, 0.8, None), blob(1, 0.6, Some((3, 0.6)))],
        background: 0.0,
        pixel_noise: 0.03,
        blob_width: 0.2,
        uniform_patterns: 0,
    };
    let data = gen_synthetic(&spec, &mut seeds.stream("data"))?;
    let d = split_domains(&data, &DomainSpec::new(3, 0), &mut seeds.stream("split"))?;

    let mut base = Model::build(&ModelSpec::small_cnn([1, 8, 8], &[4, 8], d.num_classes), &mut seeds.stream("init"))?;
    let cfg = BaseTrainConfig { epochs: 10, ..Default::default() };
    train_base(&mut base, &d.orig.train, &cfg, &mut seeds.stream("base"))?;
    let (orig0, new0) = (evaluate(&base, &d.orig.test)?, evaluate(&base, &d.new.test)?);
    println!("base model: original {orig0:.3}, new {new0:.3}");

    let buf = ReplayBuffer::from_pool(&d.orig.train, 200, &mut seeds.stream("buffer"));
    let x0 = pick_new_samples(&base, &d.new.train, 1, &mut seeds.stream("pick"))?.remove(0);

    for mode in [StatsMode::UpdatedStats, StatsMode::FixedStats] {
        let run = OneShotConfig { stats_mode: mode, lr_grid: vec![1e-1, 1e-2, 1e-3, 1e-4], ..Default::default() };
        let s = lr_search(&base, &buf, &x0, &run, None, &d.orig.val, &seeds.child("search"))?;
        println!("{mode}:");
        for p in &s.points {
            println!("  lr {:>6.0e}: {:3} steps, p(y0) {:.3}, validation {:?}", p.lr, p.iters, p.final_prob, p.val_acc);
        }
        println!(
            "  chose lr {:.0e}: original {:.3}, new {:.3}",
            s.outcome.lr,
            evaluate(&s.model, &d.orig.test)?,
            evaluate(&s.model, &d.new.test)?
        );
    }
    Ok(())
}
