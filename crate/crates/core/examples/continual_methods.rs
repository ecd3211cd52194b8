//! The replay buffer, a composed mini-batch, the EWC penalty and a GEM
//! projection, on a small randomly initialized network.

use oneshot_dil::augment::AugmentConfig;
use oneshot_dil::batchnorm::StatsMode;
use oneshot_dil::continual::{compose_minibatch, ewc_fisher, ewc_penalty, gem_project, gem_reference_gradient, ReplayBuffer};
use oneshot_dil::data::{gen_synthetic, ClassSpec, SyntheticSpec};
use oneshot_dil::models::{Model, ModelSpec};
use oneshot_dil::rng::SeedTree;
use oneshot_dil::tensor::Graph;

fn main() -> oneshot_dil::Result<()> {
    let seeds = SeedTree::new(3);
    let spec = SyntheticSpec {
        image_size: 8,
        samples_per_class: 50,
        classes: vec![
            ClassSpec { mean: vec![0.8, 0.0], covariance: None, std: Some(vec![0.1, 0.0]) },
            ClassSpec { mean: vec![0.0, 0.8], covariance: None, std: Some(vec![0.0, 0.1]) },
        ],
        background: 0.0,
        pixel_noise: 0.02,
        blob_width: 0.2,
        uniform_patterns: 0,
    };
    let data: Vec<_> = gen_synthetic(&spec, &mut seeds.stream("data"))?
        .into_iter()
        .map(|mut s| {
            s.label += 1;
            s
        })
        .collect();
    let model = Model::build(&ModelSpec::small_cnn([1, 8, 8], &[3, 4], 2), &mut seeds.stream("init"))?;

    let buf = ReplayBuffer::from_pool(&data[..80], 40, &mut seeds.stream("buffer"));
    let x0 = &data[90];
    let batch = compose_minibatch(&buf, x0, (6, 4), &AugmentConfig::default(), &mut seeds.stream("batch"))?;
    println!(
        "buffer holds {} of capacity {}; mini-batch: {} replayed + {} copies of x0",
        buf.len(),
        buf.capacity(),
        batch.original_part().count(),
        batch.new_part().count()
    );

    let fisher = ewc_fisher(&model, &buf)?;
    let mut moved = model.params().clone();
    for (_, t) in moved.iter_mut() {
        for v in t.data_mut() {
            *v += 0.01;
        }
    }
    for (label, params) in [("at the anchor", model.params()), ("after a 0.01 shift", &moved)] {
        let mut g = Graph::new();
        let pen = ewc_penalty(&mut g, params, &fisher, 100.0)?;
        println!("EWC penalty {label}: {:.6}", g.value(pen).item());
    }

    let g_ref = gem_reference_gradient(&model, &buf, 8, StatsMode::FixedStats, &mut seeds.stream("ref"))?;
    let opposed: Vec<f64> = g_ref.iter().map(|v| -v + 0.001).collect();
    let p = gem_project(&opposed, &g_ref)?;
    let after: f64 = p.grad.iter().zip(&g_ref).map(|(a, b)| a * b).sum();
    println!("GEM: raw <g, g_ref> {:.4}, after projection {:.2e}, projected {}", p.raw_dot, after, p.projected);
    Ok(())
}
