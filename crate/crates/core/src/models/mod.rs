//! Model builders (MLP and small CNN, both with batch norm in every hidden
//! block), the classification loss, and prediction.

mod checkpoint;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::ImageSample;
use crate::batchnorm::{BatchNormState, StatsMode};
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, ParameterSet, Tensor};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Hidden widths; each hidden block is linear → batch norm → ReLU.
    Mlp { hidden: Vec<usize> },
    /// Channels per block; each block is 3×3 conv → batch norm → ReLU → 2×2 max-pool.
    /// Followed by global average pooling and a linear head.
    SmallCnn { channels: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// `[C, H, W]` for images or `[d]` for flat inputs.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

impl ModelSpec {
    /// MLP from a full width list `[d, h1, ..., K]`.
    pub fn mlp(widths: &[usize]) -> Self {
        let (first, last) = (widths[0], widths[widths.len() - 1]);
        Self {
            architecture: Architecture::Mlp {
                hidden: widths[1..widths.len() - 1].to_vec(),
            },
            input_shape: vec![first],
            num_classes: last,
        }
    }

    /// Three conv blocks by default.
    pub fn small_cnn(input_shape: [usize; 3], channels: &[usize], num_classes: usize) -> Self {
        Self {
            architecture: Architecture::SmallCnn {
                channels: channels.to_vec(),
            },
            input_shape: input_shape.to_vec(),
            num_classes,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(invalid(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(invalid(format!("bad input shape {:?}", self.input_shape)));
        }
        match &self.architecture {
            Architecture::Mlp { hidden } => {
                if hidden.is_empty() || hidden.contains(&0) {
                    return Err(invalid("MLP needs at least one non-empty hidden layer"));
                }
            }
            Architecture::SmallCnn { channels } => {
                if self.input_shape.len() != 3 {
                    return Err(invalid("small_cnn input must be [C, H, W]"));
                }
                if channels.is_empty() || channels.contains(&0) {
                    return Err(invalid("small_cnn needs at least one block"));
                }
                let blocks = channels.len() as u32;
                if self.input_shape[1] >> blocks == 0 || self.input_shape[2] >> blocks == 0 {
                    return Err(invalid(format!(
                        "{:?} is too small for {blocks} pooling blocks",
                        self.input_shape
                    )));
                }
            }
        }
        Ok(())
    }

    fn hidden_widths(&self) -> &[usize] {
        match &self.architecture {
            Architecture::Mlp { hidden } => hidden,
            Architecture::SmallCnn { channels } => channels,
        }
    }

    pub fn num_bn_layers(&self) -> usize {
        self.hidden_widths().len()
    }
}

/// Softmax output for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Argmax class (1-based); ties go to the smallest label.
    pub label: usize,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn from_logits(logits: &[f64]) -> Self {
        let probs = softmax(logits);
        let mut best = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = i;
            }
        }
        Self {
            label: best + 1,
            probs,
        }
    }

    /// Probability of a 1-based label.
    pub fn prob(&self, label: usize) -> f64 {
        self.probs[label - 1]
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    crate::tensor::graph_softmax_rows(logits, logits.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: ParameterSet,
    bn: Vec<BatchNormState>,
    mode: StatsMode,
}

fn he_normal(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

const EVAL_CHUNK: usize = 256;

impl Model {
    /// He-normal weights, zero biases, γ=1, β=0, running mean 0 and variance 1.
    pub fn build(spec: &ModelSpec, rng: &mut Rng) -> Result<Model> {
        spec.validate()?;
        let mut params = ParameterSet::new();
        let mut bn = Vec::new();
        let mut add_bn = |params: &mut ParameterSet, i: usize, width: usize| -> Result<()> {
            params.insert(format!("bn{i}.gamma"), Tensor::filled(&[width], 1.0))?;
            params.insert(format!("bn{i}.beta"), Tensor::zeros(&[width]))?;
            bn.push(BatchNormState::new(width));
            Ok(())
        };
        let last_width = match &spec.architecture {
            Architecture::Mlp { hidden } => {
                let mut fan_in = spec.input_len();
                for (i, &width) in hidden.iter().enumerate() {
                    params.insert(format!("fc{i}.weight"), he_normal(rng, &[width, fan_in], fan_in))?;
                    params.insert(format!("fc{i}.bias"), Tensor::zeros(&[width]))?;
                    add_bn(&mut params, i, width)?;
                    fan_in = width;
                }
                fan_in
            }
            Architecture::SmallCnn { channels } => {
                let mut c_in = spec.input_shape[0];
                for (i, &c_out) in channels.iter().enumerate() {
                    let fan_in = c_in * 9;
                    params.insert(format!("conv{i}.weight"), he_normal(rng, &[c_out, c_in, 3, 3], fan_in))?;
                    add_bn(&mut params, i, c_out)?;
                    c_in = c_out;
                }
                c_in
            }
        };
        params.insert(
            "head.weight",
            he_normal(rng, &[spec.num_classes, last_width], last_width),
        )?;
        params.insert("head.bias", Tensor::zeros(&[spec.num_classes]))?;
        Ok(Model {
            spec: spec.clone(),
            params,
            bn,
            mode: StatsMode::UpdatedStats,
        })
    }

    pub(crate) fn from_parts(
        spec: ModelSpec,
        params: ParameterSet,
        bn: Vec<BatchNormState>,
        mode: StatsMode,
    ) -> Result<Model> {
        spec.validate()?;
        if bn.len() != spec.num_bn_layers() {
            return Err(invalid("batch-norm layer count does not match the spec"));
        }
        for s in &bn {
            s.validate()?;
        }
        Ok(Model { spec, params, bn, mode })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParameterSet) -> Result<()> {
        self.params.ensure_same_structure(&params, "set_params")?;
        self.params = params;
        Ok(())
    }

    pub fn bn_states(&self) -> &[BatchNormState] {
        &self.bn
    }

    pub fn mode(&self) -> StatsMode {
        self.mode
    }

    /// Switches every batch-norm layer at once. Stored statistics are untouched.
    pub fn set_mode(&mut self, mode: StatsMode) {
        self.mode = mode;
    }

    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.params.dimension()
    }

    /// Little-endian bytes of every layer's running mean and variance.
    pub fn bn_stats_bytes(&self) -> Vec<u8> {
        self.bn.iter().flat_map(BatchNormState::stats_bytes).collect()
    }

    /// Stacks samples into a `[N, ...input_shape]` batch.
    pub fn batch_tensor(&self, samples: &[ImageSample]) -> Result<Tensor> {
        if samples.is_empty() {
            return Err(invalid("empty batch"));
        }
        let per = self.spec.input_len();
        let mut data = Vec::with_capacity(per * samples.len());
        for s in samples {
            if s.image.numel() != per {
                return Err(Error::Shape {
                    layer: "input".into(),
                    expected: format!("{:?}", self.spec.input_shape),
                    got: format!("{:?}", s.image.shape()),
                });
            }
            data.extend_from_slice(s.image.data());
        }
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(&self.spec.input_shape);
        Tensor::new(shape, data)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let ok = s.len() >= 2 && s[1..].iter().product::<usize>() == self.spec.input_len() && {
            s[1..] == self.spec.input_shape[..] || matches!(self.spec.architecture, Architecture::Mlp { .. })
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Shape {
                layer: "input".into(),
                expected: format!("[N, {:?}]", self.spec.input_shape),
                got: format!("{s:?}"),
            })
        }
    }

    /// Forward pass in the model's own mode; see [`Model::forward_with_mode`].
    pub fn forward(&mut self, g: &mut Graph, x: Tensor) -> Result<NodeId> {
        self.forward_with_mode(g, x, self.mode)
    }

    /// Appends the network to `g` and returns the logits node. In
    /// updated-stats mode the running statistics are advanced once.
    pub fn forward_with_mode(&mut self, g: &mut Graph, x: Tensor, mode: StatsMode) -> Result<NodeId> {
        let (logits, states) = self.forward_inner(g, x, mode)?;
        if mode == StatsMode::UpdatedStats {
            self.bn = states;
        }
        Ok(logits)
    }

    fn forward_inner(
        &self,
        g: &mut Graph,
        x: Tensor,
        mode: StatsMode,
    ) -> Result<(NodeId, Vec<BatchNormState>)> {
        self.check_input(&x)?;
        let p = &self.params;
        let mut states = Vec::with_capacity(self.bn.len());
        let mut h = g.constant(x)?;
        match &self.spec.architecture {
            Architecture::Mlp { hidden } => {
                h = g.flatten(h);
                for i in 0..hidden.len() {
                    let w = g.param(p, &format!("fc{i}.weight"))?;
                    let b = g.param(p, &format!("fc{i}.bias"))?;
                    h = g.linear(h, w, Some(b))?;
                    h = self.bn_block(g, h, i, mode, &mut states)?;
                    h = g.relu(h);
                }
            }
            Architecture::SmallCnn { channels } => {
                for i in 0..channels.len() {
                    let w = g.param(p, &format!("conv{i}.weight"))?;
                    h = g.conv2d(h, w, None, 1)?;
                    h = self.bn_block(g, h, i, mode, &mut states)?;
                    h = g.relu(h);
                    h = g.max_pool2(h)?;
                }
                h = g.global_avg_pool(h)?;
            }
        }
        let w = g.param(p, "head.weight")?;
        let b = g.param(p, "head.bias")?;
        let logits = g.linear(h, w, Some(b))?;
        Ok((logits, states))
    }

    fn bn_block(
        &self,
        g: &mut Graph,
        h: NodeId,
        i: usize,
        mode: StatsMode,
        states: &mut Vec<BatchNormState>,
    ) -> Result<NodeId> {
        let gamma = g.param(&self.params, &format!("bn{i}.gamma"))?;
        let beta = g.param(&self.params, &format!("bn{i}.beta"))?;
        let (out, next) = g.batch_norm(h, gamma, beta, &self.bn[i], mode)?;
        states.push(next);
        Ok(out)
    }

    /// Logits without recording and without touching stored statistics.
    /// Updated-stats mode normalizes with the batch's own statistics.
    pub fn logits(&self, x: Tensor, mode: StatsMode) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let (id, _) = self.forward_inner(&mut g, x, mode)?;
        Ok(g.value(id).clone())
    }

    /// Prediction for one `[C, H, W]` (or flat) input in the model's mode.
    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let logits = self.logits(x.reshape(shape)?, self.mode)?;
        Ok(Prediction::from_logits(logits.data()))
    }

    /// Predictions for many samples through the running statistics.
    pub fn predict_samples(&self, samples: &[ImageSample]) -> Result<Vec<Prediction>> {
        let k = self.spec.num_classes;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_CHUNK) {
            let logits = self.logits(self.batch_tensor(chunk)?, StatsMode::Inference)?;
            out.extend(logits.data().chunks_exact(k).map(Prediction::from_logits));
        }
        Ok(out)
    }
}

fn targets(model: &Model, samples: &[ImageSample]) -> Result<Vec<usize>> {
    let k = model.spec.num_classes;
    samples
        .iter()
        .map(|s| {
            if (1..=k).contains(&s.label) {
                Ok(s.label - 1)
            } else {
                Err(invalid(format!("label {} outside 1..={k}", s.label)))
            }
        })
        .collect()
}

/// Mean softmax cross-entropy of the model on labelled samples (labels 1..=K),
/// appended to `g`. Runs a forward pass in `mode`.
pub fn loss_ce(
    model: &mut Model,
    g: &mut Graph,
    samples: &[ImageSample],
    mode: StatsMode,
) -> Result<NodeId> {
    let targets = targets(model, samples)?;
    let x = model.batch_tensor(samples)?;
    let logits = model.forward_with_mode(g, x, mode)?;
    g.softmax_cross_entropy(logits, &targets)
}

/// Same value and gradients as [`loss_ce`], but never advances the running
/// statistics, whatever the mode.
pub fn loss_ce_frozen(
    model: &Model,
    g: &mut Graph,
    samples: &[ImageSample],
    mode: StatsMode,
) -> Result<NodeId> {
    let targets = targets(model, samples)?;
    let x = model.batch_tensor(samples)?;
    let (logits, _) = model.forward_inner(g, x, mode)?;
    g.softmax_cross_entropy(logits, &targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn mlp_parameter_count() {
        let m = Model::build(&ModelSpec::mlp(&[4, 8, 3]), &mut Rng::seed_from_u64(0)).unwrap();
        // linear 4·8+8, batch-norm γ and β 8+8, head 8·3+3
        assert_eq!(m.num_parameters(), 4 * 8 + 8 + 8 + 8 + 8 * 3 + 3);
        assert_eq!(m.num_parameters(), 83);
    }

    #[test]
    fn fresh_running_stats() {
        let spec = ModelSpec::small_cnn([1, 8, 8], &[2, 3], 3);
        let m = Model::build(&spec, &mut Rng::seed_from_u64(0)).unwrap();
        for s in m.bn_states() {
            assert!(s.running_mean.iter().all(|&v| v == 0.0));
            assert!(s.running_var.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn same_seed_same_model() {
        let spec = ModelSpec::small_cnn([1, 8, 8], &[2, 3], 3);
        let a = Model::build(&spec, &mut Rng::seed_from_u64(5)).unwrap();
        let b = Model::build(&spec, &mut Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fewer_than_two_classes_rejected() {
        assert!(Model::build(&ModelSpec::mlp(&[4, 8, 1]), &mut Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn analytic_softmax_values() {
        let p = Prediction::from_logits(&[2.0, 1.0]);
        assert!((p.probs[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((p.probs[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert_eq!(p.label, 1);
        let tie = Prediction::from_logits(&[0.0; 4]);
        assert_eq!(tie.label, 1);
        assert!(tie.probs.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn updated_mode_single_sample_prediction_rejected() {
        let mut m = Model::build(&ModelSpec::mlp(&[3, 4, 2]), &mut Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::vector(vec![0.1, 0.2, 0.3]);
        assert!(matches!(m.predict(&x), Err(Error::DegenerateBatch(1))));
        m.set_mode(StatsMode::FixedStats);
        assert!(m.predict(&x).is_ok());
    }
}
