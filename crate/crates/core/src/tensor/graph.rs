use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{ParameterSet, Tensor};
use crate::batchnorm::{self, BatchNormState, BnCache, StatsMode};
use crate::error::{invalid, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Constant,
    Param(String),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Relu {
        x: NodeId,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: Option<BnCache>,
    },
    SoftmaxCe {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    Square {
        x: NodeId,
    },
    Sum {
        x: NodeId,
    },
    WeightedSum {
        x: NodeId,
        weights: Vec<f64>,
    },
    QuadPenalty {
        nodes: Vec<NodeId>,
        weights: Vec<Tensor>,
        anchors: Vec<Tensor>,
        scale: f64,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    /// Some parameter or differentiable input lies upstream.
    needs_grad: bool,
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Constant | Op::Param(_) => Vec::new(),
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(*b);
                v
            }
            Op::MaxPool2 { x, .. }
            | Op::Relu { x }
            | Op::GlobalAvgPool { x }
            | Op::Reshape { x }
            | Op::Scale { x, .. }
            | Op::Square { x }
            | Op::Sum { x }
            | Op::WeightedSum { x, .. } => vec![*x],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::SoftmaxCe { logits, .. } => vec![*logits],
            Op::Add { a, b } => vec![*a, *b],
            Op::QuadPenalty { nodes, .. } => nodes.clone(),
        }
    }
}

/// Define-by-run tape: every op appends a node holding its output and
/// whatever the backward pass needs. Nodes are stored in creation order,
/// which is a topological order; backward walks it in reverse.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that influenced it.
#[derive(Debug)]
pub struct NodeGrads {
    grads: Vec<Option<Tensor>>,
}

impl NodeGrads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

fn shape_err(layer: &str, expected: impl Into<String>, got: &[usize]) -> Error {
    Error::Shape {
        layer: layer.to_string(),
        expected: expected.into(),
        got: format!("{got:?}"),
    }
}

impl Graph {
    /// A graph that records everything needed for [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            recording: true,
        }
    }

    /// Forward-only graph; caches are skipped and backward is rejected.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let needs_grad = match &op {
            Op::Input | Op::Param(_) => true,
            Op::Constant => false,
            other => other.inputs().iter().any(|id| self.nodes[id.0].needs_grad),
        };
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn label(&self, id: NodeId, fallback: &str) -> String {
        match &self.nodes[id.0].op {
            Op::Param(name) => name.clone(),
            _ => fallback.to_string(),
        }
    }

    /// Differentiable leaf that is not a named parameter.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        value.ensure_finite("graph input")?;
        Ok(self.push(Op::Input, value))
    }

    /// Leaf that never receives a gradient, such as a data batch.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        value.ensure_finite("graph constant")?;
        Ok(self.push(Op::Constant, value))
    }

    /// Leaf for a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = params
            .get(name)
            .ok_or_else(|| invalid(format!("unknown parameter `{name}`")))?;
        value.ensure_finite(&format!("parameter `{name}`"))?;
        let id = self.push(Op::Param(name.to_string()), value.clone());
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// `x·Wᵀ + b`, with `W` shaped `[out, in]`. A 1-D `x` is one sample.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let layer = self.label(w, "linear");
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 2 {
            return Err(shape_err(&layer, "2-D weight [out, in]", &ws));
        }
        let (fan_out, fan_in) = (ws[0], ws[1]);
        let xs = self.value(x).shape().to_vec();
        let (n, out_shape) = match xs.as_slice() {
            [d] if *d == fan_in => (1, vec![fan_out]),
            [n, d] if *d == fan_in => (*n, vec![*n, fan_out]),
            _ => return Err(shape_err(&layer, format!("[N, {fan_in}]"), &xs)),
        };
        if let Some(b) = b {
            if self.value(b).shape() != [fan_out] {
                return Err(shape_err(&layer, format!("bias [{fan_out}]"), self.value(b).shape()));
            }
        }
        let y = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            n,
            fan_in,
            fan_out,
        );
        Ok(self.push(Op::Linear { x, w, b }, Tensor::from_parts(out_shape, y)))
    }

    /// Stride-1 convolution with `padding` zeros on every side.
    /// `W` is `[C_out, C_in, k, k]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        padding: usize,
    ) -> Result<NodeId> {
        let layer = self.label(w, "conv2d");
        let ws = self.value(w).shape().to_vec();
        let xs = self.value(x).shape().to_vec();
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(shape_err(&layer, "square kernel [C_out, C_in, k, k]", &ws));
        }
        if xs.len() != 4 || xs[1] != ws[1] {
            return Err(shape_err(&layer, format!("[N, {}, H, W]", ws[1]), &xs));
        }
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            height: xs[2],
            width: xs[3],
            c_out: ws[0],
            kernel: ws[2],
            padding,
        };
        if geom.height + 2 * padding < geom.kernel || geom.width + 2 * padding < geom.kernel {
            return Err(shape_err(&layer, "input at least as large as the kernel", &xs));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [geom.c_out] {
                return Err(shape_err(&layer, format!("bias [{}]", geom.c_out), self.value(b).shape()));
            }
        }
        let (y, cols) = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
            self.recording,
        );
        let shape = vec![geom.batch, geom.c_out, geom.out_height(), geom.out_width()];
        Ok(self.push(Op::Conv2d { x, w, b, geom, cols }, Tensor::from_parts(shape, y)))
    }

    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(shape_err("max-pool", "[N, C, H>=2, W>=2]", &xs));
        }
        let (y, argmax) = kernels::max_pool2_forward(self.value(x).data(), xs[0] * xs[1], xs[2], xs[3]);
        let shape = vec![xs[0], xs[1], xs[2] / 2, xs[3] / 2];
        Ok(self.push(Op::MaxPool2 { x, argmax }, Tensor::from_parts(shape, y)))
    }

    /// Elementwise `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu { x }, y)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(shape_err("global-avg-pool", "[N, C, H, W]", &xs));
        }
        let y = kernels::global_avg_pool(self.value(x).data(), xs[0] * xs[1], xs[2] * xs[3]);
        Ok(self.push(Op::GlobalAvgPool { x }, Tensor::from_parts(vec![xs[0], xs[1]], y)))
    }

    /// `[N, ...]` → `[N, prod(...)]`.
    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let n = v.shape()[0];
        let y = Tensor::from_parts(vec![n, v.numel() / n], v.data().to_vec());
        self.push(Op::Reshape { x }, y)
    }

    /// Batch normalization; returns the output node and the layer's next state.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &BatchNormState,
        mode: StatsMode,
    ) -> Result<(NodeId, BatchNormState)> {
        let fwd = batchnorm::bn_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            state,
            mode,
        )?;
        let cache = if self.recording { fwd.cache } else { None };
        let id = self.push(Op::BatchNorm { x, gamma, beta, cache }, fwd.y);
        Ok((id, fwd.state))
    }

    /// Mean softmax cross-entropy over the batch. `targets` are 0-based class indices.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let ls = self.value(logits).shape().to_vec();
        let (n, k) = match ls.as_slice() {
            [k] => (1, *k),
            [n, k] => (*n, *k),
            _ => return Err(shape_err("softmax-ce", "[N, K] logits", &ls)),
        };
        if targets.len() != n {
            return Err(invalid(format!("{} targets for a batch of {n}", targets.len())));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= k) {
            return Err(invalid(format!("class index {t} out of range for {k} classes")));
        }
        let probs = softmax_rows(self.value(logits).data(), k);
        let mut loss = 0.0;
        for (row, &t) in self.value(logits).data().chunks_exact(k).zip(targets) {
            loss += log_sum_exp(row) - row[t];
        }
        loss /= n as f64;
        let op = Op::SoftmaxCe {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(op, Tensor::scalar(loss)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", format!("{:?}", va.shape()), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let y = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(Op::Add { a, b }, y))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let y = self.value(x).map(|v| v * factor);
        self.push(Op::Scale { x, factor }, y)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| v * v);
        self.push(Op::Square { x }, y)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum { x }, Tensor::scalar(s))
    }

    /// `Σ wᵢ·xᵢ` against constant weights.
    pub fn weighted_sum(&mut self, x: NodeId, weights: &[f64]) -> Result<NodeId> {
        if weights.len() != self.value(x).numel() {
            return Err(shape_err(
                "weighted-sum",
                format!("{} weights", self.value(x).numel()),
                &[weights.len()],
            ));
        }
        let s = self.value(x).data().iter().zip(weights).map(|(a, b)| a * b).sum();
        let op = Op::WeightedSum {
            x,
            weights: weights.to_vec(),
        };
        Ok(self.push(op, Tensor::scalar(s)))
    }

    /// `(scale/2)·Σ_j Σ_i w_ji·(x_ji − a_ji)²` over several nodes.
    pub fn quad_penalty(
        &mut self,
        nodes: &[NodeId],
        weights: Vec<Tensor>,
        anchors: Vec<Tensor>,
        scale: f64,
    ) -> Result<NodeId> {
        if nodes.len() != weights.len() || nodes.len() != anchors.len() {
            return Err(invalid("quadratic penalty needs one weight and anchor per node"));
        }
        let mut total = 0.0;
        for ((&id, w), a) in nodes.iter().zip(&weights).zip(&anchors) {
            let v = self.value(id);
            if v.shape() != w.shape() || v.shape() != a.shape() {
                return Err(shape_err(&self.label(id, "penalty"), format!("{:?}", v.shape()), w.shape()));
            }
            for ((x, w), a) in v.data().iter().zip(w.data()).zip(a.data()) {
                total += w * (x - a) * (x - a);
            }
        }
        let op = Op::QuadPenalty {
            nodes: nodes.to_vec(),
            weights,
            anchors,
            scale,
        };
        Ok(self.push(op, Tensor::scalar(0.5 * scale * total)))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<NodeGrads> {
        if !self.recording {
            return Err(Error::NoForward("graph was built without gradient recording".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::NoForward("loss node is not on this graph".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(shape_err("backward", "scalar loss", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(NodeGrads { grads })
    }

    /// Parameter gradients laid out like `params`; untouched entries are zero.
    pub fn param_grads(&self, loss: NodeId, params: &ParameterSet) -> Result<ParameterSet> {
        let node_grads = self.backward(loss)?;
        let mut out = params.zeros_like();
        for (name, slot) in out.iter_mut() {
            if let Some(&id) = self.params.get(name) {
                if let Some(g) = node_grads.get(id) {
                    slot.add_assign(g);
                }
            }
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let wanted = |id: NodeId| self.nodes[id.0].needs_grad;
        let mut acc = |id: NodeId, t: Tensor| {
            if !wanted(id) {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let like = |id: NodeId, data: Vec<f64>| Tensor::from_parts(self.value(id).shape().to_vec(), data);

        match &self.nodes[i].op {
            Op::Input | Op::Constant | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let ws = self.value(*w).shape();
                let (fan_out, fan_in) = (ws[0], ws[1]);
                let n = self.value(*x).numel() / fan_in;
                let lg = kernels::linear_backward(
                    g.data(),
                    self.value(*x).data(),
                    self.value(*w).data(),
                    n,
                    fan_in,
                    fan_out,
                );
                acc(*x, like(*x, lg.x));
                acc(*w, like(*w, lg.w));
                if let Some(b) = b {
                    acc(*b, like(*b, lg.b));
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let cols = cols
                    .as_ref()
                    .ok_or_else(|| Error::NoForward("convolution ran without recording".into()))?;
                let cg = kernels::conv2d_backward(g.data(), cols, self.value(*w).data(), geom, wanted(*x));
                if let Some(dx) = cg.x {
                    acc(*x, like(*x, dx));
                }
                acc(*w, like(*w, cg.w));
                if let Some(b) = b {
                    acc(*b, like(*b, cg.b));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dx[src] += gv;
                }
                acc(*x, like(*x, dx));
            }
            Op::Relu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                acc(*x, like(*x, dx));
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.value(*x).shape();
                let plane = xs[2] * xs[3];
                let mut dx = Vec::with_capacity(self.value(*x).numel());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat(gv / plane as f64).take(plane));
                }
                acc(*x, like(*x, dx));
            }
            Op::Reshape { x } => acc(*x, like(*x, g.data().to_vec())),
            Op::BatchNorm { x, gamma, beta, cache } => {
                let cache = cache.as_ref().ok_or_else(|| {
                    Error::NoForward("batch-norm ran in inference mode; nothing to differentiate".into())
                })?;
                let bg = batchnorm::bn_backward(g, self.value(*gamma).data(), cache, cache.mode())?;
                acc(*x, bg.x);
                acc(*gamma, like(*gamma, bg.gamma));
                acc(*beta, like(*beta, bg.beta));
            }
            Op::SoftmaxCe { logits, targets, probs } => {
                let k = probs.len() / targets.len();
                let n = targets.len() as f64;
                let scale = g.item() / n;
                let mut d = probs.clone();
                for (row, &t) in d.chunks_exact_mut(k).zip(targets) {
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                acc(*logits, like(*logits, d));
            }
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Scale { x, factor } => acc(*x, g.map(|v| v * factor)),
            Op::Square { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(v, gv)| 2.0 * v * gv)
                    .collect();
                acc(*x, like(*x, dx));
            }
            Op::Sum { x } => {
                let v = g.item();
                acc(*x, self.value(*x).map(|_| v));
            }
            Op::WeightedSum { x, weights } => {
                let v = g.item();
                acc(*x, like(*x, weights.iter().map(|w| w * v).collect()));
            }
            Op::QuadPenalty {
                nodes,
                weights,
                anchors,
                scale,
            } => {
                let k = g.item() * scale;
                for ((&id, w), a) in nodes.iter().zip(weights).zip(anchors) {
                    let d = self
                        .value(id)
                        .data()
                        .iter()
                        .zip(w.data())
                        .zip(a.data())
                        .map(|((x, w), a)| k * w * (x - a))
                        .collect();
                    acc(id, like(id, d));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Row-wise softmax of a `[rows, k]` buffer.
pub(crate) fn softmax_rows(data: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - m).exp()));
        let z: f64 = out[start..].iter().sum();
        for v in &mut out[start..] {
            *v /= z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(entries: &[(&str, Tensor)]) -> ParameterSet {
        let mut p = ParameterSet::new();
        for (k, v) in entries {
            p.insert(*k, v.clone()).unwrap();
        }
        p
    }

    #[test]
    fn identity_graph_returns_input() {
        let mut g = Graph::new();
        let x = Tensor::vector(vec![1.5, -2.0]);
        let id = g.input(x.clone()).unwrap();
        assert_eq!(g.value(id), &x);
    }

    #[test]
    fn linear_identity_weights() {
        let p = params(&[
            ("w", Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()),
            ("b", Tensor::vector(vec![0.0, 0.0])),
        ]);
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let (w, b) = (g.param(&p, "w").unwrap(), g.param(&p, "b").unwrap());
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_hand_product() {
        let p = params(&[
            ("w", Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap()),
            ("b", Tensor::vector(vec![1.0, 0.0])),
        ]);
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![2.0, 3.0])).unwrap();
        let (w, b) = (g.param(&p, "w").unwrap(), g.param(&p, "b").unwrap());
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[6.0, 3.0]);
    }

    #[test]
    fn linear_shape_mismatch_names_the_layer() {
        let p = params(&[("fc1.weight", Tensor::zeros(&[2, 3]))]);
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let w = g.param(&p, "fc1.weight").unwrap();
        match g.linear(x, w, None) {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, "fc1.weight"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut g = Graph::new();
        assert!(matches!(
            g.input(Tensor::vector(vec![1.0, f64::NAN])),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn square_gradient() {
        let p = params(&[("theta", Tensor::scalar(3.0))]);
        let mut g = Graph::new();
        let t = g.param(&p, "theta").unwrap();
        let sq = g.square(t);
        let loss = g.sum(sq);
        let grads = g.param_grads(loss, &p).unwrap();
        assert_eq!(grads.get("theta").unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_ce_gradient_at_uniform_logits() {
        let mut g = Graph::new();
        let z = g.input(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
        let loss = g.softmax_cross_entropy(z, &[0]).unwrap();
        assert!((g.value(loss).item() - 2f64.ln()).abs() < 1e-15);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(z).unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn untouched_parameters_get_zero_gradient() {
        let p = params(&[("used", Tensor::scalar(2.0)), ("unused", Tensor::vector(vec![1.0, 1.0]))]);
        let mut g = Graph::new();
        let u = g.param(&p, "used").unwrap();
        let loss = g.square(u);
        let grads = g.param_grads(loss, &p).unwrap();
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0, 0.0]);
        assert!(grads.same_structure(&p));
    }

    #[test]
    fn backward_needs_a_recorded_forward() {
        let g = Graph::new();
        assert!(matches!(g.backward(NodeId(0)), Err(Error::NoForward(_))));
        let mut ng = Graph::no_grad();
        let x = ng.input(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(ng.backward(x), Err(Error::NoForward(_))));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap();
        let r = g.relu(x);
        let loss = g.sum(r);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }
}
