//! SGD with a cosine schedule and Adam minimizing the same quadratic bowl.

use oneshot_dil::optim::{AdamConfig, CosineSchedule, OptState};
use oneshot_dil::tensor::{ParameterSet, Tensor};

/// Gradient of `Σ cᵢ (θᵢ − 1)²`, badly scaled on purpose.
fn grad(p: &ParameterSet) -> oneshot_dil::Result<ParameterSet> {
    let theta = p.get("theta").unwrap().data();
    let scale = [1.0, 10.0, 100.0];
    let g = theta.iter().zip(scale).map(|(t, c)| 2.0 * c * (t - 1.0)).collect();
    let mut out = ParameterSet::new();
    out.insert("theta", Tensor::vector(g))?;
    Ok(out)
}

fn run(name: &str, mut opt: OptState, lr: f64) -> oneshot_dil::Result<()> {
    let mut p = ParameterSet::new();
    p.insert("theta", Tensor::vector(vec![0.0; 3]))?;
    for step in 0..200 {
        let g = grad(&p)?;
        let rate = opt.current_lr(lr);
        opt.step(&mut p, &g, rate)?;
        if step % 50 == 49 {
            println!("{name} step {:3}: theta {:.4?}", step + 1, p.get("theta").unwrap().data());
        }
    }
    Ok(())
}

fn main() -> oneshot_dil::Result<()> {
    let schedule = CosineSchedule { max_lr: 0.009, min_lr: 0.0, total_steps: 200 };
    for t in [0, 50, 100, 150, 200] {
        println!("cosine lr at step {t}: {:.5}", schedule.lr_at(t));
    }
    run("sgd ", OptState::sgd(Some(schedule)), 0.0)?;

    let mut p = ParameterSet::new();
    p.insert("theta", Tensor::vector(vec![0.0; 3]))?;
    run("adam", OptState::adam(&p, AdamConfig::default()), 0.05)
}
