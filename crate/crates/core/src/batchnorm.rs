//! Batch normalization with three statistics modes, plus the running-statistics trace.
//!
//! Normalization is per channel over the batch axis (dense inputs `[N, C]`)
//! or over batch and spatial axes (feature maps `[N, C, H, W]`).
//!
//! * [`StatsMode::UpdatedStats`]: batch statistics in forward, running
//!   averages updated with `r ← (1−m)·r + m·batch`. The variance fed to the
//!   running average is the biased batch variance.
//! * [`StatsMode::FixedStats`]: running averages are used in forward and
//!   backward as constants and never change.
//! * [`StatsMode::Inference`]: same arithmetic as fixed, but nothing is
//!   cached for a backward pass.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatsMode {
    UpdatedStats,
    FixedStats,
    Inference,
}

impl StatsMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            StatsMode::UpdatedStats => "updated-stats",
            StatsMode::FixedStats => "fixed-stats",
            StatsMode::Inference => "inference",
        }
    }

    /// Whether forward passes in this mode normalize with the running averages.
    pub fn uses_running_stats(&self) -> bool {
        !matches!(self, StatsMode::UpdatedStats)
    }
}

impl fmt::Display for StatsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StatsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "updated-stats" => Ok(StatsMode::UpdatedStats),
            "fixed-stats" => Ok(StatsMode::FixedStats),
            "inference" => Ok(StatsMode::Inference),
            other => Err(invalid(format!("unknown statistics mode `{other}`"))),
        }
    }
}

/// Running statistics and hyperparameters of one batch-norm layer.
///
/// The trainable scale and shift live in the model's parameter set (so the
/// optimizer, EWC and GEM see them); this holds everything else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    /// Fresh state: mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        Self::with_hyperparams(channels, DEFAULT_MOMENTUM, DEFAULT_EPS)
    }

    pub fn with_hyperparams(channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.running_mean.len() != self.running_var.len() {
            return Err(invalid("running mean and variance differ in channel count"));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(invalid(format!("momentum {} outside (0, 1)", self.momentum)));
        }
        if !(self.eps > 0.0) {
            return Err(invalid(format!("epsilon {} must be positive", self.eps)));
        }
        if self.running_var.iter().any(|v| !(*v >= 0.0)) {
            return Err(invalid("running variance must be nonnegative"));
        }
        Ok(())
    }

    pub fn mean_of_means(&self) -> f64 {
        self.running_mean.iter().sum::<f64>() / self.channels() as f64
    }

    pub fn mean_of_vars(&self) -> f64 {
        self.running_var.iter().sum::<f64>() / self.channels() as f64
    }

    /// Little-endian bytes of the running mean then variance.
    pub fn stats_bytes(&self) -> Vec<u8> {
        self.running_mean
            .iter()
            .chain(&self.running_var)
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }
}

/// Values saved by a recording forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    mode: StatsMode,
    batch: usize,
    channels: usize,
    spatial: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl BnCache {
    pub fn mode(&self) -> StatsMode {
        self.mode
    }
}

#[derive(Debug, Clone)]
pub struct BnForward {
    pub y: Tensor,
    pub state: BatchNormState,
    /// `None` in inference mode.
    pub cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
pub struct BnGrads {
    pub x: Tensor,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

fn layout(x: &Tensor, channels: usize) -> Result<(usize, usize)> {
    let shape = x.shape();
    let ok = match shape.len() {
        2 | 4 => shape[1] == channels,
        _ => false,
    };
    if !ok {
        return Err(Error::Shape {
            layer: "batch-norm".into(),
            expected: format!("[N, {channels}] or [N, {channels}, H, W]"),
            got: format!("{shape:?}"),
        });
    }
    let spatial = shape[2..].iter().product::<usize>();
    Ok((shape[0], spatial))
}

pub fn bn_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    state: &BatchNormState,
    mode: StatsMode,
) -> Result<BnForward> {
    let channels = state.channels();
    if gamma.len() != channels || beta.len() != channels {
        return Err(Error::Shape {
            layer: "batch-norm".into(),
            expected: format!("{channels} scale/shift entries"),
            got: format!("{}/{}", gamma.len(), beta.len()),
        });
    }
    let (batch, spatial) = layout(x, channels)?;
    let data = x.data();
    let count = (batch * spatial) as f64;
    let idx = |n: usize, c: usize| (n * channels + c) * spatial;

    let mut new_state = state.clone();
    let (mean, var) = match mode {
        StatsMode::UpdatedStats => {
            if batch < 2 {
                return Err(Error::DegenerateBatch(batch));
            }
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for c in 0..channels {
                let mut s = 0.0;
                for n in 0..batch {
                    s += data[idx(n, c)..idx(n, c) + spatial].iter().sum::<f64>();
                }
                let mu = s / count;
                let mut ss = 0.0;
                for n in 0..batch {
                    ss += data[idx(n, c)..idx(n, c) + spatial]
                        .iter()
                        .map(|v| (v - mu) * (v - mu))
                        .sum::<f64>();
                }
                mean[c] = mu;
                var[c] = ss / count;
            }
            let m = state.momentum;
            for c in 0..channels {
                new_state.running_mean[c] = (1.0 - m) * state.running_mean[c] + m * mean[c];
                new_state.running_var[c] = (1.0 - m) * state.running_var[c] + m * var[c];
            }
            (mean, var)
        }
        StatsMode::FixedStats | StatsMode::Inference => {
            (state.running_mean.clone(), state.running_var.clone())
        }
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
    let keep = mode != StatsMode::Inference;
    let mut xhat = Vec::with_capacity(if keep { data.len() } else { 0 });
    let mut y = Vec::with_capacity(data.len());
    for (i, block) in data.chunks_exact(spatial).enumerate() {
        let c = i % channels;
        let (mu, is, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
        if keep {
            let start = xhat.len();
            xhat.extend(block.iter().map(|v| (v - mu) * is));
            y.extend(xhat[start..].iter().map(|h| g * h + b));
        } else {
            y.extend(block.iter().map(|v| g * ((v - mu) * is) + b));
        }
    }
    let cache = keep.then(|| BnCache {
        mode,
        batch,
        channels,
        spatial,
        xhat,
        inv_std,
    });
    Ok(BnForward {
        y: Tensor::from_parts(x.shape().to_vec(), y),
        state: new_state,
        cache,
    })
}

pub fn bn_backward(
    upstream: &Tensor,
    gamma: &[f64],
    cache: &BnCache,
    mode: StatsMode,
) -> Result<BnGrads> {
    if mode != cache.mode {
        return Err(Error::ModeMismatch {
            forward: cache.mode,
            backward: mode,
        });
    }
    if upstream.numel() != cache.xhat.len() {
        return Err(Error::Shape {
            layer: "batch-norm backward".into(),
            expected: format!("{} upstream values", cache.xhat.len()),
            got: format!("{:?}", upstream.shape()),
        });
    }
    let (batch, channels, spatial) = (cache.batch, cache.channels, cache.spatial);
    let dy = upstream.data();
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for (i, (d, h)) in dy.chunks_exact(spatial).zip(cache.xhat.chunks_exact(spatial)).enumerate() {
        let c = i % channels;
        dbeta[c] += d.iter().sum::<f64>();
        dgamma[c] += d.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
    }
    let mut dx = Vec::with_capacity(dy.len());
    match mode {
        StatsMode::UpdatedStats => {
            let count = (batch * spatial) as f64;
            for (i, (d, h)) in dy.chunks_exact(spatial).zip(cache.xhat.chunks_exact(spatial)).enumerate() {
                let c = i % channels;
                let k = gamma[c] * cache.inv_std[c] / count;
                let (db, dg) = (dbeta[c], dgamma[c]);
                dx.extend(d.iter().zip(h).map(|(d, h)| k * (count * d - db - h * dg)));
            }
        }
        StatsMode::FixedStats => {
            for (i, d) in dy.chunks_exact(spatial).enumerate() {
                let k = gamma[i % channels] * cache.inv_std[i % channels];
                dx.extend(d.iter().map(|d| k * d));
            }
        }
        StatsMode::Inference => unreachable!("inference forward keeps no cache"),
    }
    Ok(BnGrads {
        x: Tensor::from_parts(upstream.shape().to_vec(), dx),
        gamma: dgamma,
        beta: dbeta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub layer: usize,
    pub running_mean: f64,
    pub running_var: f64,
}

/// Channel-averaged running statistics, one record per layer per forward pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsTrace {
    records: Vec<TraceRecord>,
}

impl StatsTrace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one record per layer for forward pass `step`.
    pub fn record(&mut self, step: u64, layers: &[BatchNormState]) -> Result<()> {
        if let Some(last) = self.records.last() {
            if step < last.step {
                return Err(invalid(format!(
                    "trace step {step} precedes last recorded step {}",
                    last.step
                )));
            }
        }
        self.records.extend(layers.iter().enumerate().map(|(layer, s)| TraceRecord {
            step,
            layer,
            running_mean: s.mean_of_means(),
            running_var: s.mean_of_vars(),
        }));
        Ok(())
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn layer(&self, layer: usize) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.layer == layer)
    }

    pub fn clear(&mut self) {
        self.records.clear();
    }

    /// Moves all records out, leaving the trace empty.
    pub fn drain(&mut self) -> Vec<TraceRecord> {
        std::mem::take(&mut self.records)
    }

    /// CSV with header `step,layer,running_mean,running_var`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "layer", "running_mean", "running_var"])?;
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                r.layer.to_string(),
                r.running_mean.to_string(),
                r.running_var.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
