use oneshot_dil::augment::ImageSample;
use oneshot_dil::batchnorm::StatsMode;
use oneshot_dil::continual::ReplayBuffer;
use oneshot_dil::data::{gen_synthetic, ClassSpec, SyntheticSpec};
use oneshot_dil::harness::{
    aggregate, evaluate, judge, judge_probability, lr_search, median, one_shot_dil, pick_new_samples,
    split_domains, train_base, BaseTrainConfig, DomainSpec, Domains, Method, OneShotConfig, Termination,
    TrialRow,
};
use oneshot_dil::models::{Model, ModelSpec};
use oneshot_dil::rng::SeedTree;
use oneshot_dil::tensor::Tensor;

fn spec(classes: Vec<ClassSpec>, per_class: usize) -> SyntheticSpec {
    SyntheticSpec {
        image_size: 8,
        samples_per_class: per_class,
        classes,
        background: 0.0,
        pixel_noise: 0.02,
        blob_width: 0.15,
        uniform_patterns: 0,
    }
}

fn blob(dim: usize, k: usize, amp: f64, std: f64) -> ClassSpec {
    let mut mean = vec![0.0; dim];
    let mut sd = vec![0.0; dim];
    mean[k] = amp;
    sd[k] = std;
    ClassSpec { mean, covariance: None, std: Some(sd) }
}

#[test]
fn separable_classes_are_learned() {
    let seeds = SeedTree::new(3);
    let data = gen_synthetic(&spec(vec![blob(2, 0, 0.9, 0.1), blob(2, 1, 0.9, 0.1)], 300), &mut seeds.stream("d"))
        .unwrap();
    let data: Vec<ImageSample> = data.into_iter().map(|s| ImageSample { label: s.label + 1, ..s }).collect();
    let (train, test): (Vec<_>, Vec<_>) = data.iter().cloned().enumerate().partition(|(i, _)| i % 3 != 0);
    let train: Vec<_> = train.into_iter().map(|(_, s)| s).collect();
    let test: Vec<_> = test.into_iter().map(|(_, s)| s).collect();
    let mut model = Model::build(&ModelSpec::mlp(&[64, 4, 2]), &mut seeds.stream("init")).unwrap();
    let cfg = BaseTrainConfig { epochs: 10, batch_size: 32, ..Default::default() };
    let summary = train_base(&mut model, &train, &cfg, &mut seeds.stream("train")).unwrap();
    assert_eq!(summary.epoch_loss.len(), 10);
    assert!(evaluate(&model, &test).unwrap() >= 0.99);
}

#[test]
fn accuracy_examples() {
    let seeds = SeedTree::new(4);
    let mut model = Model::build(&ModelSpec::mlp(&[4, 3, 3]), &mut seeds.stream("init")).unwrap();
    let mut params = model.params().clone();
    *params.get_mut("head.weight").unwrap() = Tensor::zeros(&[3, 3]);
    *params.get_mut("head.bias").unwrap() = Tensor::vector(vec![5.0, 0.0, 0.0]);
    model.set_params(params).unwrap();
    let balanced: Vec<ImageSample> = (0..9)
        .map(|i| ImageSample::new(Tensor::filled(&[1, 2, 2], 0.1 * i as f64), 1 + i % 3).unwrap())
        .collect();
    assert!((evaluate(&model, &balanced).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert!(evaluate(&model, &[]).is_err());

    // Recount against per-sample judgements on a random model.
    let model = Model::build(&ModelSpec::mlp(&[4, 5, 3]), &mut seeds.stream("other")).unwrap();
    let preds = model.predict_samples(&balanced).unwrap();
    let hits = balanced.iter().zip(&preds).filter(|(s, p)| p.label == s.label).count();
    assert_eq!(evaluate(&model, &balanced).unwrap(), hits as f64 / 9.0);
    for (s, p) in balanced.iter().zip(&preds) {
        let prob = judge_probability(&model, s).unwrap();
        assert!((prob - p.prob(s.label)).abs() < 1e-12);
        assert_eq!(judge(&model, s, 0.5).unwrap(), prob > 0.5);
    }
}

#[test]
fn aggregate_examples() {
    let row = |trial, acc| TrialRow {
        trial,
        method: Method::Ce,
        stats_mode: StatsMode::FixedStats,
        lr: 1e-3,
        iters: 10,
        terminated: Termination::Converged,
        acc_new: acc,
        acc_orig: 0.5,
    };
    let r = aggregate(&[row(0, 0.7)]).unwrap();
    assert_eq!((r.acc_new.median, r.acc_new.std), (0.7, 0.0));
    let r = aggregate(&[row(0, 0.1), row(1, 0.2), row(2, 0.3)]).unwrap();
    assert_eq!(r.acc_new.median, 0.2);
    assert_eq!(r.rows.len(), 3);
    assert!((median(&[0.1, 0.3]) - 0.2).abs() < 1e-15);
    assert!(aggregate(&[]).is_err());
}

/// Four original classes plus a new one sharing class 0's label.
fn small_problem(seed: u64) -> (Domains, Model, ReplayBuffer) {
    let seeds = SeedTree::new(seed);
    let classes = (0..5).map(|k| blob(5, k, 0.8, 0.05)).collect();
    let data = gen_synthetic(&spec(classes, 120), &mut seeds.stream("d")).unwrap();
    let mut dspec = DomainSpec::new(4, 0);
    dspec.max_orig_val = Some(60);
    let d = split_domains(&data, &dspec, &mut seeds.stream("s")).unwrap();
    let mut model = Model::build(&ModelSpec::small_cnn([1, 8, 8], &[4, 4], d.num_classes), &mut seeds.stream("i")).unwrap();
    let cfg = BaseTrainConfig { epochs: 8, batch_size: 16, ..Default::default() };
    train_base(&mut model, &d.orig.train, &cfg, &mut seeds.stream("t")).unwrap();
    let buf = ReplayBuffer::from_pool(&d.orig.train, 200, &mut seeds.stream("b"));
    (d, model, buf)
}

#[test]
fn learning_rate_search_examples() {
    let (d, base, buf) = small_problem(6);
    assert_eq!(d.y0, 1);
    assert!(evaluate(&base, &d.orig.test).unwrap() > 0.9);
    let picks = pick_new_samples(&base, &d.new.train, 1, &mut SeedTree::new(1).stream("p")).unwrap();
    let x0 = &picks[0];
    let seeds = SeedTree::new(77);
    let cfg = |grid: Vec<f64>| OneShotConfig {
        stats_mode: StatsMode::FixedStats,
        replay_batch: 8,
        copies: 8,
        lr_grid: grid,
        ..Default::default()
    };

    let zero = lr_search(&base, &buf, x0, &cfg(vec![0.0]), None, &d.orig.val, &seeds).unwrap();
    assert!(zero.non_terminating);
    assert_eq!(zero.outcome.termination, Termination::IterationCap);
    assert_eq!(zero.outcome.iters, 100);
    assert_eq!(zero.model.params(), base.params());

    let one = lr_search(&base, &buf, x0, &cfg(vec![3e-2]), None, &d.orig.val, &seeds).unwrap();
    assert!(!one.non_terminating);
    assert_eq!(one.chosen, 0);
    assert_eq!(one.outcome.termination, Termination::Converged);
    assert!(judge_probability(&one.model, x0).unwrap() > 0.99);

    // Non-converged grid points never win, higher validation accuracy beats a smaller rate.
    let best = lr_search(&base, &buf, x0, &cfg(vec![2e-2, 2.5e-2, 3e-2]), None, &d.orig.val, &seeds).unwrap();
    assert_eq!(best.points[0].val_acc, None);
    assert!(best.points[2].val_acc > best.points[1].val_acc);
    assert_eq!(best.chosen, 2);

    // Huge rates jump straight to predicting y0 everywhere, so validation accuracy ties.
    let two = lr_search(&base, &buf, x0, &cfg(vec![1.0, 2.0, 0.5]), None, &d.orig.val, &seeds).unwrap();
    let accs: Vec<f64> = two.points.iter().map(|p| p.val_acc.unwrap()).collect();
    assert_eq!(accs[0], accs[1], "tie-break needs equal validation accuracy");
    assert_eq!(accs[1], accs[2], "tie-break needs equal validation accuracy");
    assert_eq!(two.points[two.chosen].lr, 0.5);

    // An x0 the base model already accepts is refused.
    let loose = OneShotConfig { delta: 0.5, ..cfg(vec![3e-2]) };
    let easy = d.orig.test.iter().find(|s| judge(&base, s, 0.5).unwrap()).unwrap();
    assert!(one_shot_dil(&base, &buf, easy, &loose, 3e-2, None, &mut seeds.stream("x")).is_err());
    assert!(one_shot_dil(&base, &buf, x0, &loose, 3e-2, None, &mut seeds.stream("x")).is_ok());
}
