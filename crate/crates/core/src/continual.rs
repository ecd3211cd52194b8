//! Replay buffer, mini-batch composition, EWC and single-constraint GEM.

use log::warn;
use rand::seq::{index, SliceRandom};

use crate::augment::{replicate, AugmentConfig, ImageSample};
use crate::batchnorm::StatsMode;
use crate::error::{invalid, Error, Result};
use crate::models::{loss_ce_frozen, Model};
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, ParameterSet, Tensor};

/// Stored original-domain samples available during incremental learning.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    samples: Vec<ImageSample>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(samples: Vec<ImageSample>, capacity: usize) -> Result<Self> {
        if samples.len() > capacity {
            return Err(invalid(format!(
                "{} samples exceed buffer capacity {capacity}",
                samples.len()
            )));
        }
        Ok(Self { samples, capacity })
    }

    /// Up to `capacity` samples drawn uniformly without replacement from `pool`.
    pub fn from_pool(pool: &[ImageSample], capacity: usize, rng: &mut Rng) -> Self {
        let n = capacity.min(pool.len());
        let samples = index::sample(rng, pool.len(), n)
            .into_iter()
            .map(|i| pool[i].clone())
            .collect();
        Self { samples, capacity }
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// `n` distinct stored samples in random order.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Vec<ImageSample>> {
        if self.samples.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        if n > self.samples.len() {
            return Err(invalid(format!(
                "cannot draw {n} distinct samples from a buffer of {}",
                self.samples.len()
            )));
        }
        Ok(index::sample(rng, self.samples.len(), n)
            .into_iter()
            .map(|i| self.samples[i].clone())
            .collect())
    }
}

/// Shuffled union of replayed samples and augmented copies of `x0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub samples: Vec<ImageSample>,
    /// `true` where the sample is a copy of the new-domain sample.
    pub from_new: Vec<bool>,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn original_part(&self) -> impl Iterator<Item = &ImageSample> {
        self.samples.iter().zip(&self.from_new).filter(|(_, n)| !**n).map(|(s, _)| s)
    }

    pub fn new_part(&self) -> impl Iterator<Item = &ImageSample> {
        self.samples.iter().zip(&self.from_new).filter(|(_, n)| **n).map(|(s, _)| s)
    }
}

/// `|B|` replayed samples plus `|C|` augmented copies of `x0`, shuffled.
pub fn compose_minibatch(
    buf: &ReplayBuffer,
    x0: &ImageSample,
    sizes: (usize, usize),
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<MiniBatch> {
    let (nb, nc) = sizes;
    if buf.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    if nc == 0 {
        return Err(invalid("the new-domain part needs at least one copy"));
    }
    let b = buf.sample(nb, rng)?;
    let c = replicate(x0, nc, cfg, rng)?;
    let mut tagged: Vec<(ImageSample, bool)> =
        b.into_iter().map(|s| (s, false)).chain(c.into_iter().map(|s| (s, true))).collect();
    tagged.shuffle(rng);
    let (samples, from_new) = tagged.into_iter().unzip();
    Ok(MiniBatch { samples, from_new })
}

/// `|B|` replayed samples plus `|C|` distinct samples from a new-domain pool,
/// shuffled. Used for the many-sample comparison regime.
pub fn compose_from_pool(
    buf: &ReplayBuffer,
    pool: &ReplayBuffer,
    sizes: (usize, usize),
    rng: &mut Rng,
) -> Result<MiniBatch> {
    let (nb, nc) = sizes;
    if buf.is_empty() || pool.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let b = buf.sample(nb, rng)?;
    let c = pool.sample(nc, rng)?;
    let mut tagged: Vec<(ImageSample, bool)> =
        b.into_iter().map(|s| (s, false)).chain(c.into_iter().map(|s| (s, true))).collect();
    tagged.shuffle(rng);
    let (samples, from_new) = tagged.into_iter().unzip();
    Ok(MiniBatch { samples, from_new })
}

/// Diagonal Fisher information and the parameters it is anchored to.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag {
    pub fisher: ParameterSet,
    pub anchor: ParameterSet,
}

/// Empirical diagonal Fisher over the buffer: mean squared per-sample
/// log-likelihood gradient with the true labels. Passes use the running
/// statistics, so the model is left untouched.
pub fn ewc_fisher(model: &Model, buf: &ReplayBuffer) -> Result<FisherDiag> {
    if buf.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let mut fisher = model.params().zeros_like();
    for sample in buf.samples() {
        let mut g = Graph::new();
        let loss = loss_ce_frozen(model, &mut g, std::slice::from_ref(sample), StatsMode::FixedStats)?;
        let grads = g.param_grads(loss, model.params())?;
        for ((_, f), (_, d)) in fisher.iter_mut().zip(grads.iter()) {
            for (fi, di) in f.data_mut().iter_mut().zip(d.data()) {
                *fi += di * di;
            }
        }
    }
    let n = buf.len() as f64;
    for (_, f) in fisher.iter_mut() {
        for v in f.data_mut() {
            *v /= n;
        }
    }
    Ok(FisherDiag {
        fisher,
        anchor: model.params().clone(),
    })
}

/// Appends `(λ/2)·Σ F·(θ − θ*)²` over every parameter to `g`.
pub fn ewc_penalty(
    g: &mut Graph,
    params: &ParameterSet,
    fisher: &FisherDiag,
    lambda: f64,
) -> Result<NodeId> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(invalid(format!("EWC lambda must be finite and nonnegative, got {lambda}")));
    }
    params.ensure_same_structure(&fisher.fisher, "EWC Fisher")?;
    params.ensure_same_structure(&fisher.anchor, "EWC anchor")?;
    let mut nodes = Vec::with_capacity(params.len());
    let mut weights: Vec<Tensor> = Vec::with_capacity(params.len());
    let mut anchors: Vec<Tensor> = Vec::with_capacity(params.len());
    for ((name, _), ((_, f), (_, a))) in params.iter().zip(fisher.fisher.iter().zip(fisher.anchor.iter())) {
        nodes.push(g.param(params, name)?);
        weights.push(f.clone());
        anchors.push(a.clone());
    }
    g.quad_penalty(&nodes, weights, anchors, lambda)
}

/// Result of a GEM projection.
#[derive(Debug, Clone, PartialEq)]
pub struct GemProjection {
    pub grad: Vec<f64>,
    /// `⟨g, g_ref⟩` before projection.
    pub raw_dot: f64,
    pub projected: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Removes the component of `g` that opposes `g_ref`, only when they conflict.
pub fn gem_project(g: &[f64], g_ref: &[f64]) -> Result<GemProjection> {
    if g.len() != g_ref.len() {
        return Err(Error::Shape {
            layer: "gem".into(),
            expected: format!("[{}]", g_ref.len()),
            got: format!("[{}]", g.len()),
        });
    }
    let raw_dot = dot(g, g_ref);
    if !(raw_dot < 0.0) {
        return Ok(GemProjection { grad: g.to_vec(), raw_dot, projected: false });
    }
    let norm2 = dot(g_ref, g_ref);
    if !(norm2 > 0.0) || !norm2.is_finite() {
        warn!("GEM reference gradient is degenerate; update left unprojected");
        return Ok(GemProjection { grad: g.to_vec(), raw_dot, projected: false });
    }
    let coef = raw_dot / norm2;
    let grad = g.iter().zip(g_ref).map(|(gi, ri)| gi - coef * ri).collect();
    Ok(GemProjection { grad, raw_dot, projected: true })
}

/// Flattened cross-entropy gradient on a fresh buffer mini-batch of
/// `min(batch_size, |buffer|)` samples. The forward pass runs in `mode` but
/// never advances running statistics.
pub fn gem_reference_gradient(
    model: &Model,
    buf: &ReplayBuffer,
    batch_size: usize,
    mode: StatsMode,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if buf.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let batch = buf.sample(batch_size.clamp(1, buf.len()), rng)?;
    let mut g = Graph::new();
    let loss = loss_ce_frozen(model, &mut g, &batch, mode)?;
    Ok(g.param_grads(loss, model.params())?.flatten())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelSpec;
    use rand::SeedableRng;

    fn sample(v: f64, label: usize) -> ImageSample {
        ImageSample::new(Tensor::filled(&[1, 4, 4], v), label).unwrap()
    }

    #[test]
    fn minibatch_sizes_and_labels() {
        let mut rng = Rng::seed_from_u64(3);
        let buf = ReplayBuffer::new((0..40).map(|i| sample(i as f64 / 40.0, 1 + i % 2)).collect(), 40).unwrap();
        let x0 = sample(0.9, 2);
        for (nb, nc) in [(32, 32), (39, 1)] {
            let mb = compose_minibatch(&buf, &x0, (nb, nc), &AugmentConfig::default(), &mut rng).unwrap();
            assert_eq!(mb.len(), nb + nc);
            assert_eq!(mb.new_part().count(), nc);
            assert!(mb.new_part().all(|s| s.label == 2));
        }
        let one = ReplayBuffer::new(vec![sample(0.3, 1)], 1).unwrap();
        let mb = compose_minibatch(&one, &x0, (1, 1), &AugmentConfig::identity(), &mut rng).unwrap();
        assert_eq!(mb.original_part().next().unwrap(), &one.samples()[0]);
        assert_eq!(mb.new_part().next().unwrap(), &x0);
    }

    #[test]
    fn empty_buffer_rejected() {
        let buf = ReplayBuffer::new(vec![], 4).unwrap();
        let mut rng = Rng::seed_from_u64(0);
        assert!(matches!(
            compose_minibatch(&buf, &sample(0.1, 1), (0, 1), &AugmentConfig::identity(), &mut rng),
            Err(Error::EmptyBuffer)
        ));
        let model = Model::build(&ModelSpec::mlp(&[16, 4, 2]), &mut rng).unwrap();
        assert!(matches!(ewc_fisher(&model, &buf), Err(Error::EmptyBuffer)));
    }

    #[test]
    fn gem_hand_projection() {
        let p = gem_project(&[1.0, -1.0], &[0.0, 1.0]).unwrap();
        assert_eq!(p.grad, vec![1.0, 0.0]);
        assert!(p.projected);
        let q = gem_project(&[1.0, 2.0], &[1.0, 0.0]).unwrap();
        assert_eq!(q.grad, vec![1.0, 2.0]);
        let r = gem_project(&[-2.0, 4.0], &[1.0, -2.0]).unwrap();
        assert!(r.grad.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn ewc_scalar_example() {
        let mut params = ParameterSet::new();
        params.insert("w", Tensor::vector(vec![4.0])).unwrap();
        let mut anchor = ParameterSet::new();
        anchor.insert("w", Tensor::vector(vec![1.0])).unwrap();
        let mut f = ParameterSet::new();
        f.insert("w", Tensor::vector(vec![1.0])).unwrap();
        let fisher = FisherDiag { fisher: f, anchor };
        let mut g = Graph::new();
        let pen = ewc_penalty(&mut g, &params, &fisher, 2.0).unwrap();
        assert_eq!(g.value(pen).item(), 9.0);
        let grads = g.param_grads(pen, &params).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[6.0]);
        assert!(ewc_penalty(&mut Graph::new(), &params, &fisher, -1.0).is_err());
    }
}
