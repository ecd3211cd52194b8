//! The three statistics modes side by side on the same batch.

use oneshot_dil::batchnorm::{bn_forward, BatchNormState, StatsMode};
use oneshot_dil::tensor::Tensor;

fn main() -> oneshot_dil::Result<()> {
    let x = Tensor::new(vec![4, 2], vec![1.0, 10.0, 3.0, 12.0, 5.0, 14.0, 7.0, 16.0])?;
    let (gamma, beta) = ([1.0, 1.0], [0.0, 0.0]);
    let state = BatchNormState::new(2);

    for mode in [StatsMode::UpdatedStats, StatsMode::FixedStats, StatsMode::Inference] {
        let out = bn_forward(&x, &gamma, &beta, &state, mode)?;
        println!("{mode}");
        println!("  output        {:?}", out.y.data());
        println!("  running mean  {:?}", out.state.running_mean);
        println!("  running var   {:?}", out.state.running_var);
        println!("  state changed {}", out.state.stats_bytes() != state.stats_bytes());
    }

    // Repeating one batch pulls the running mean toward it geometrically.
    let mut s = state.clone();
    for step in 1..=30 {
        s = bn_forward(&x, &gamma, &beta, &s, StatsMode::UpdatedStats)?.state;
        if step % 10 == 0 {
            println!("after {step:2} updates: running mean {:?}", s.running_mean);
        }
    }
    Ok(())
}
