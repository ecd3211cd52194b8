//! Central finite-difference checks of the tape's analytic gradients.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{Graph, NodeId, ParameterSet, Tensor};
use crate::batchnorm::{BatchNormState, StatsMode};
use crate::error::Result;
use crate::rng::Rng;

/// Differentiable op kinds that [`finite_diff_check`] can instantiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Linear,
    Conv2d,
    MaxPool2,
    Relu,
    GlobalAvgPool,
    BatchNormUpdated,
    BatchNormFixed,
    SoftmaxCrossEntropy,
    QuadPenalty,
}

impl OpKind {
    pub const ALL: [OpKind; 9] = [
        OpKind::Linear,
        OpKind::Conv2d,
        OpKind::MaxPool2,
        OpKind::Relu,
        OpKind::GlobalAvgPool,
        OpKind::BatchNormUpdated,
        OpKind::BatchNormFixed,
        OpKind::SoftmaxCrossEntropy,
        OpKind::QuadPenalty,
    ];
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest relative error between the tape gradient of `build`'s scalar
/// output and central differences with step `eps`, over every leaf coordinate.
/// `build` must read the leaves through [`Graph::param`].
pub fn check_gradients<F>(leaves: &ParameterSet, eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParameterSet) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, leaves)?;
    let analytic = g.param_grads(loss, leaves)?;

    let eval = |p: &ParameterSet| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, p)?;
        Ok(g.value(loss).item())
    };

    let base = leaves.flatten();
    let flat_analytic = analytic.flatten();
    let mut worst: f64 = 0.0;
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + eps;
        let plus = eval(&leaves.unflatten(&probe)?)?;
        probe[i] = base[i] - eps;
        let minus = eval(&leaves.unflatten(&probe)?)?;
        probe[i] = base[i];
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(flat_analytic[i], numeric));
    }
    Ok(worst)
}

fn normal_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Values bounded away from zero by `gap` (no ReLU kink within reach of the probe).
fn away_from_zero(rng: &mut Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.sample(StandardNormal);
            if v.abs() > gap {
                break v;
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Feature maps whose 2×2 pooling windows have a clear maximum.
fn distinct_pool_windows(rng: &mut Rng, shape: &[usize], gap: f64) -> Tensor {
    loop {
        let t = normal_tensor(rng, shape, 1.0);
        let (h, w) = (shape[2], shape[3]);
        let planes = shape[0] * shape[1];
        let clear = (0..planes).all(|p| {
            (0..h / 2).all(|oy| {
                (0..w / 2).all(|ox| {
                    let mut vals: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(dy, dx)| t.data()[p * h * w + (2 * oy + dy) * w + 2 * ox + dx])
                        .collect();
                    vals.sort_by(|a, b| b.total_cmp(a));
                    vals[0] - vals[1] > gap
                })
            })
        });
        if clear {
            return t;
        }
    }
}

fn leaves(entries: Vec<(&str, Tensor)>) -> ParameterSet {
    let mut p = ParameterSet::new();
    for (k, v) in entries {
        p.insert(k, v).expect("distinct leaf names");
    }
    p
}

/// Samples a random instance of `kind`, reduces it to a scalar with random
/// weights, and returns the worst relative error against central differences.
pub fn finite_diff_check(kind: OpKind, rng: &mut Rng, eps: f64) -> Result<f64> {
    let gap = 100.0 * eps;
    match kind {
        OpKind::Linear => {
            let p = leaves(vec![
                ("x", normal_tensor(rng, &[3, 4], 1.0)),
                ("w", normal_tensor(rng, &[5, 4], 0.5)),
                ("b", normal_tensor(rng, &[5], 0.5)),
            ]);
            let r = normal_tensor(rng, &[3, 5], 1.0).into_data();
            check_gradients(&p, eps, |g, p| {
                let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
                let y = g.linear(x, w, Some(b))?;
                g.weighted_sum(y, &r)
            })
        }
        OpKind::Conv2d => {
            let p = leaves(vec![
                ("x", normal_tensor(rng, &[2, 2, 5, 5], 1.0)),
                ("w", normal_tensor(rng, &[3, 2, 3, 3], 0.5)),
                ("b", normal_tensor(rng, &[3], 0.5)),
            ]);
            let r = normal_tensor(rng, &[2, 3, 5, 5], 1.0).into_data();
            check_gradients(&p, eps, |g, p| {
                let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
                let y = g.conv2d(x, w, Some(b), 1)?;
                g.weighted_sum(y, &r)
            })
        }
        OpKind::MaxPool2 => {
            let p = leaves(vec![("x", distinct_pool_windows(rng, &[2, 2, 4, 4], gap))]);
            let r = normal_tensor(rng, &[2, 2, 2, 2], 1.0).into_data();
            check_gradients(&p, eps, |g, p| {
                let x = g.param(p, "x")?;
                let y = g.max_pool2(x)?;
                g.weighted_sum(y, &r)
            })
        }
        OpKind::Relu => {
            let p = leaves(vec![("x", away_from_zero(rng, &[4, 6], gap))]);
            let r = normal_tensor(rng, &[4, 6], 1.0).into_data();
            check_gradients(&p, eps, |g, p| {
                let x = g.param(p, "x")?;
                let y = g.relu(x);
                g.weighted_sum(y, &r)
            })
        }
        OpKind::GlobalAvgPool => {
            let p = leaves(vec![("x", normal_tensor(rng, &[2, 3, 3, 3], 1.0))]);
            let r = normal_tensor(rng, &[2, 3], 1.0).into_data();
            check_gradients(&p, eps, |g, p| {
                let x = g.param(p, "x")?;
                let y = g.global_avg_pool(x)?;
                g.weighted_sum(y, &r)
            })
        }
        OpKind::BatchNormUpdated | OpKind::BatchNormFixed => {
            let mode = if kind == OpKind::BatchNormUpdated {
                StatsMode::UpdatedStats
            } else {
                StatsMode::FixedStats
            };
            let mut state = BatchNormState::new(3);
            state.running_mean = normal_tensor(rng, &[3], 1.0).into_data();
            state.running_var = (0..3).map(|_| rng.gen_range(0.5..2.0)).collect();
            let p = leaves(vec![
                ("x", normal_tensor(rng, &[4, 3, 2, 2], 1.0)),
                ("gamma", normal_tensor(rng, &[3], 1.0)),
                ("beta", normal_tensor(rng, &[3], 1.0)),
            ]);
            let r = normal_tensor(rng, &[4, 3, 2, 2], 1.0).into_data();
            check_gradients(&p, eps, |g, p| {
                let (x, ga, be) = (g.param(p, "x")?, g.param(p, "gamma")?, g.param(p, "beta")?);
                let (y, _) = g.batch_norm(x, ga, be, &state, mode)?;
                g.weighted_sum(y, &r)
            })
        }
        OpKind::SoftmaxCrossEntropy => {
            let p = leaves(vec![("z", normal_tensor(rng, &[4, 5], 2.0))]);
            let mut targets: Vec<usize> = (0..5).collect();
            targets.shuffle(rng);
            targets.truncate(4);
            check_gradients(&p, eps, |g, p| {
                let z = g.param(p, "z")?;
                g.softmax_cross_entropy(z, &targets)
            })
        }
        OpKind::QuadPenalty => {
            let shapes: [&[usize]; 2] = [&[3, 2], &[4]];
            let weights: Vec<Tensor> = shapes
                .iter()
                .map(|s| normal_tensor(rng, s, 1.0).map(f64::abs))
                .collect();
            let anchors: Vec<Tensor> = shapes.iter().map(|s| normal_tensor(rng, s, 1.0)).collect();
            let p = leaves(vec![
                ("a", normal_tensor(rng, shapes[0], 1.0)),
                ("b", normal_tensor(rng, shapes[1], 1.0)),
            ]);
            let lambda = rng.gen_range(0.5..5.0);
            check_gradients(&p, eps, |g, p| {
                let nodes = [g.param(p, "a")?, g.param(p, "b")?];
                g.quad_penalty(&nodes, weights.clone(), anchors.clone(), lambda)
            })
        }
    }
}
