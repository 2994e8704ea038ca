//! Reverse-mode automatic differentiation over the fixed layer set.
//!
//! A [`Graph`] is a tape: every operation appends a node whose inputs are
//! earlier nodes, so node order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::batchnorm::{self, BatchNormState};
use crate::nn::conv::{self, Conv2dGeometry};
use crate::nn::resize::ResizePlan;
use crate::nn::softmax;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a batchnorm node gets its statistics.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Per-channel statistics of this input; `eps` is added to the variance.
    Train { eps: T },
    /// Frozen running statistics.
    Infer(&'a BatchNormState<T>),
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
        geom: Conv2dGeometry,
        cols: Vec<T>,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: Vec<T>,
        stats: BnSaved<T>,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Resize {
        input: NodeId,
        plan: ResizePlan<T>,
    },
    ChannelSoftmax(NodeId),
    WeightedSum {
        features: Vec<NodeId>,
        weights: NodeId,
    },
    Concat(Vec<NodeId>),
    Gather {
        input: NodeId,
        pixels: Vec<usize>,
    },
    GroupScores {
        sources: NodeId,
        targets: NodeId,
        group: usize,
    },
    CrossEntropy {
        scores: NodeId,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(NodeId),
}

enum BnSaved<T> {
    Train { inv_std: Vec<T>, mean: Vec<T>, var: Vec<T> },
    Infer(BatchNormState<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of primitive operations.
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    keep_buffers: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            keep_buffers: true,
        }
    }

    /// A graph that keeps no backward buffers; [`Graph::backward`] is an
    /// error on it.
    pub fn inference() -> Self {
        Graph {
            keep_buffers: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn take_value(&mut self, id: NodeId) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[id.0].value, Tensor::scalar(T::zero()))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", op_name(&op))));
        }
        let requires_grad = self.keep_buffers && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Constant input; receives a gradient but is not marked trainable.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        let requires_grad = self.keep_buffers;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        let geom = Conv2dGeometry::new(
            self.value(input).shape(),
            self.value(weights).shape(),
            self.value(bias).shape(),
        )?;
        let x = self.value(input).data();
        let cols = if geom.kernel == 1 {
            Vec::new()
        } else {
            conv::im2col(&geom, x)
        };
        let out = conv::forward(
            &geom,
            if geom.kernel == 1 { x } else { &cols },
            self.value(weights).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new([geom.out_channels, geom.height, geom.width], out)?;
        let cols = if self.keep_buffers { cols } else { Vec::new() };
        self.push(
            value,
            Op::Conv2d {
                input,
                weights,
                bias,
                geom,
                cols,
            },
            &[input, weights, bias],
        )
    }

    pub fn batchnorm(&mut self, input: NodeId, gamma: NodeId, beta: NodeId, mode: BnMode<'_, T>) -> Result<NodeId> {
        let (c, h, w) = self.value(input).chw()?;
        if h * w == 0 {
            return Err(Error::invalid("batchnorm over zero spatial extent"));
        }
        for (what, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).shape() != [c] {
                return Err(Error::shape(format!(
                    "batchnorm {what} has shape {:?}, input has {c} channels",
                    self.value(id).shape()
                )));
            }
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let (out, normalized, stats) = match mode {
            BnMode::Train { eps } => {
                let f = batchnorm::forward_train(x, c, g, b, eps);
                let stats = BnSaved::Train {
                    inv_std: f.inv_std,
                    mean: f.mean,
                    var: f.var,
                };
                (f.output, f.normalized, stats)
            }
            BnMode::Infer(state) => {
                if state.channels() != c {
                    return Err(Error::shape(format!(
                        "batchnorm state has {} channels, input has {c}",
                        state.channels()
                    )));
                }
                let (out, normalized) = batchnorm::forward_infer(x, state, g, b);
                (out, normalized, BnSaved::Infer(state.clone()))
            }
        };
        let normalized = if self.keep_buffers { normalized } else { Vec::new() };
        let value = Tensor::new([c, h, w], out)?;
        self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                stats,
            },
            &[input, gamma, beta],
        )
    }

    /// Batch mean and population variance used by a train-mode batchnorm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[T], &[T])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm {
                stats: BnSaved::Train { mean, var, .. },
                ..
            } => Some((mean, var)),
            _ => None,
        }
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let value = self.value(input).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(input), &[input])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let bv = self.value(b).data();
        let mut value = self.value(a).clone();
        for (x, &y) in value.data_mut().iter_mut().zip(bv) {
            *x *= y;
        }
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    fn same_shape(&self, what: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn resize(&mut self, input: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let (c, h, w) = self.value(input).chw()?;
        let plan = ResizePlan::new(h, w, out_h, out_w)?;
        let out = plan.forward(self.value(input).data(), c);
        let value = Tensor::new([c, out_h, out_w], out)?;
        self.push(value, Op::Resize { input, plan }, &[input])
    }

    pub fn channel_softmax(&mut self, input: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(input).chw()?;
        let out = softmax::channel_softmax(self.value(input).data(), c);
        let value = Tensor::new([c, h, w], out)?;
        self.push(value, Op::ChannelSoftmax(input), &[input])
    }

    /// `out[d, p] = sum_s weights[s, p] * features[s][d, p]`.
    pub fn weighted_sum(&mut self, features: &[NodeId], weights: NodeId) -> Result<NodeId> {
        let (s, h, w) = self.value(weights).chw()?;
        if features.len() != s {
            return Err(Error::shape(format!(
                "weighted_sum: {} feature maps for {s} weight channels",
                features.len()
            )));
        }
        let (d, fh, fw) = self.value(features[0]).chw()?;
        for &f in features {
            if self.value(f).shape() != [d, h, w] || (fh, fw) != (h, w) {
                return Err(Error::shape(format!(
                    "weighted_sum: feature map {:?} vs weights {s}x{h}x{w}",
                    self.value(f).shape()
                )));
            }
        }
        let n = h * w;
        let wv = self.value(weights).data();
        let mut out = vec![T::zero(); d * n];
        for (si, &f) in features.iter().enumerate() {
            let a = &wv[si * n..(si + 1) * n];
            let fv = self.value(f).data();
            for ch in 0..d {
                let dst = &mut out[ch * n..(ch + 1) * n];
                let src = &fv[ch * n..(ch + 1) * n];
                for p in 0..n {
                    dst[p] += a[p] * src[p];
                }
            }
        }
        let value = Tensor::new([d, h, w], out)?;
        let mut inputs = features.to_vec();
        inputs.push(weights);
        self.push(
            value,
            Op::WeightedSum {
                features: features.to_vec(),
                weights,
            },
            &inputs,
        )
    }

    /// Stacks `C_i x H x W` maps along the channel axis.
    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let (_, h, w) = self.value(inputs[0]).chw()?;
        let mut data = Vec::new();
        let mut channels = 0;
        for &i in inputs {
            let (c, ih, iw) = self.value(i).chw()?;
            if (ih, iw) != (h, w) {
                return Err(Error::shape(format!("concat: {ih}x{iw} vs {h}x{w}")));
            }
            channels += c;
            data.extend_from_slice(self.value(i).data());
        }
        let value = Tensor::new([channels, h, w], data)?;
        self.push(value, Op::Concat(inputs.to_vec()), inputs)
    }

    /// Pulls the channel vectors at the given `(row, col)` pixels out of a
    /// `D x H x W` map into an `N x D` matrix.
    pub fn gather(&mut self, input: NodeId, positions: &[(usize, usize)]) -> Result<NodeId> {
        let (d, h, w) = self.value(input).chw()?;
        if positions.is_empty() {
            return Err(Error::invalid("gather: no positions"));
        }
        let mut pixels = Vec::with_capacity(positions.len());
        for &(r, c) in positions {
            if r >= h || c >= w {
                return Err(Error::invalid(format!("gather: ({r}, {c}) outside {h}x{w} map")));
            }
            pixels.push(r * w + c);
        }
        let n = h * w;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(pixels.len() * d);
        for &p in &pixels {
            out.extend((0..d).map(|ch| x[ch * n + p]));
        }
        let value = Tensor::new([pixels.len(), d], out)?;
        self.push(value, Op::Gather { input, pixels }, &[input])
    }

    /// Inner products of row `b` of `sources` (`B x D`) with rows
    /// `b*group..(b+1)*group` of `targets` (`B*group x D`). Output `B x group`.
    pub fn group_scores(&mut self, sources: NodeId, targets: NodeId, group: usize) -> Result<NodeId> {
        let (b, d) = matrix_dims(self.value(sources))?;
        let (bt, dt) = matrix_dims(self.value(targets))?;
        if d != dt || group == 0 || bt != b * group {
            return Err(Error::shape(format!(
                "group_scores: sources {b}x{d}, targets {bt}x{dt}, group {group}"
            )));
        }
        let s = self.value(sources).data();
        let t = self.value(targets).data();
        let mut out = vec![T::zero(); b * group];
        for i in 0..b {
            let src = &s[i * d..(i + 1) * d];
            for j in 0..group {
                let row = &t[(i * group + j) * d..(i * group + j + 1) * d];
                out[i * group + j] = src.iter().zip(row).map(|(&x, &y)| x * y).sum();
            }
        }
        let value = Tensor::new([b, group], out)?;
        self.push(
            value,
            Op::GroupScores {
                sources,
                targets,
                group,
            },
            &[sources, targets],
        )
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy(&mut self, scores: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (b, n) = matrix_dims(self.value(scores))?;
        if targets.len() != b {
            return Err(Error::shape(format!(
                "cross_entropy: {} targets for {b} rows",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::invalid(format!(
                "cross_entropy: target {t} out of range for {n} candidates"
            )));
        }
        let s = self.value(scores).data();
        let mut probs = Vec::with_capacity(b * n);
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let (loss, p) = softmax::cross_entropy(&s[i * n..(i + 1) * n], t);
            total += loss;
            probs.extend(p);
        }
        let value = Tensor::scalar(total / T::from_f64(b as f64));
        self.push(
            value,
            Op::CrossEntropy {
                scores,
                targets: targets.to_vec(),
                probs,
            },
            &[scores],
        )
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let total = self.value(input).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(input), &[input])
    }

    /// Gradient of the last backward root with respect to `id`; zeros if the
    /// node was not reached.
    pub fn grad(&self, id: NodeId) -> Tensor<T> {
        match self.grads.get(id.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.value(id).shape().to_vec()),
        }
    }

    /// Back-propagates from a scalar `root`. Gradients are kept for leaf nodes.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.keep_buffers {
            return Err(Error::invalid("backward on an inference graph"));
        }
        if !self.value(root).is_scalar() {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape().to_vec(), T::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &grad, &mut grads)?;
        }
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::NonFinite("gradient".into()));
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, grad: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let g = grad.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weights,
                bias,
                geom,
                cols,
            } => {
                let w = self.value(*weights);
                let mut gw = vec![T::zero(); w.len()];
                let mut gb = vec![T::zero(); geom.out_channels];
                let x = self.value(*input).data();
                let cols = if geom.kernel == 1 { x } else { cols.as_slice() };
                let want_input = self.needs(*input);
                let gcols = conv::backward(geom, cols, w.data(), g, &mut gw, &mut gb, want_input);
                if let Some(gcols) = gcols {
                    let gx = if geom.kernel == 1 {
                        gcols
                    } else {
                        let mut gx = vec![T::zero(); x.len()];
                        conv::col2im(geom, &gcols, &mut gx);
                        gx
                    };
                    accumulate(grads, *input, self.value(*input).shape(), gx);
                }
                if self.needs(*weights) {
                    accumulate(grads, *weights, w.shape(), gw);
                }
                if self.needs(*bias) {
                    accumulate(grads, *bias, self.value(*bias).shape(), gb);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                stats,
            } => {
                let gam = self.value(*gamma).data();
                let mut gg = vec![T::zero(); gam.len()];
                let mut gbeta = vec![T::zero(); gam.len()];
                let gx = match stats {
                    BnSaved::Train { inv_std, .. } => {
                        batchnorm::backward_train(g, normalized, inv_std, gam, &mut gg, &mut gbeta)
                    }
                    BnSaved::Infer(state) => batchnorm::backward_infer(g, normalized, state, gam, &mut gg, &mut gbeta),
                };
                if self.needs(*input) {
                    accumulate(grads, *input, self.value(*input).shape(), gx);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, &[gam.len()], gg);
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, &[gam.len()], gbeta);
                }
            }
            Op::Relu(input) => {
                // subgradient at exactly zero is zero
                let gx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &d)| if y > T::zero() { d } else { T::zero() })
                    .collect();
                accumulate(grads, *input, node.value.shape(), gx);
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if self.needs(*id) {
                        accumulate(grads, *id, node.value.shape(), g.to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                for (id, other) in [(a, b), (b, a)] {
                    if self.needs(*id) {
                        let o = self.value(*other).data();
                        let gx = g.iter().zip(o).map(|(&d, &v)| d * v).collect();
                        accumulate(grads, *id, node.value.shape(), gx);
                    }
                }
            }
            Op::Resize { input, plan } => {
                let c = node.value.shape()[0];
                accumulate(grads, *input, self.value(*input).shape(), plan.backward(g, c));
            }
            Op::ChannelSoftmax(input) => {
                let c = node.value.shape()[0];
                let gx = softmax::channel_softmax_backward(node.value.data(), g, c);
                accumulate(grads, *input, node.value.shape(), gx);
            }
            Op::WeightedSum { features, weights } => {
                let wt = self.value(*weights);
                let n = wt.shape()[1] * wt.shape()[2];
                let d = node.value.shape()[0];
                let wv = wt.data();
                let mut gweights = vec![T::zero(); wt.len()];
                for (si, &f) in features.iter().enumerate() {
                    let a = &wv[si * n..(si + 1) * n];
                    let fv = self.value(f).data();
                    let ga = &mut gweights[si * n..(si + 1) * n];
                    for ch in 0..d {
                        let gsrc = &g[ch * n..(ch + 1) * n];
                        let fsrc = &fv[ch * n..(ch + 1) * n];
                        for p in 0..n {
                            ga[p] += gsrc[p] * fsrc[p];
                        }
                    }
                    if self.needs(f) {
                        let mut gf = vec![T::zero(); d * n];
                        for ch in 0..d {
                            for p in 0..n {
                                gf[ch * n + p] = a[p] * g[ch * n + p];
                            }
                        }
                        accumulate(grads, f, node.value.shape(), gf);
                    }
                }
                if self.needs(*weights) {
                    accumulate(grads, *weights, wt.shape(), gweights);
                }
            }
            Op::Concat(inputs) => {
                let mut offset = 0;
                for &i in inputs {
                    let len = self.value(i).len();
                    if self.needs(i) {
                        accumulate(grads, i, self.value(i).shape(), g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::Gather { input, pixels } => {
                let x = self.value(*input);
                let d = x.shape()[0];
                let n = x.shape()[1] * x.shape()[2];
                let mut gx = vec![T::zero(); x.len()];
                for (row, &p) in pixels.iter().enumerate() {
                    for ch in 0..d {
                        gx[ch * n + p] += g[row * d + ch];
                    }
                }
                accumulate(grads, *input, x.shape(), gx);
            }
            Op::GroupScores {
                sources,
                targets,
                group,
            } => {
                let s = self.value(*sources);
                let t = self.value(*targets);
                let (b, d) = (s.shape()[0], s.shape()[1]);
                let (sv, tv) = (s.data(), t.data());
                if self.needs(*sources) {
                    let mut gs = vec![T::zero(); s.len()];
                    for i in 0..b {
                        for j in 0..*group {
                            let k = g[i * group + j];
                            let row = &tv[(i * group + j) * d..(i * group + j + 1) * d];
                            for (acc, &v) in gs[i * d..(i + 1) * d].iter_mut().zip(row) {
                                *acc += k * v;
                            }
                        }
                    }
                    accumulate(grads, *sources, s.shape(), gs);
                }
                if self.needs(*targets) {
                    let mut gt = vec![T::zero(); t.len()];
                    for i in 0..b {
                        let src = &sv[i * d..(i + 1) * d];
                        for j in 0..*group {
                            let k = g[i * group + j];
                            let row = &mut gt[(i * group + j) * d..(i * group + j + 1) * d];
                            for (acc, &v) in row.iter_mut().zip(src) {
                                *acc = k * v;
                            }
                        }
                    }
                    accumulate(grads, *targets, t.shape(), gt);
                }
            }
            Op::CrossEntropy { scores, targets, probs } => {
                let shape = self.value(*scores).shape();
                let n = shape[1];
                let scale = g[0] / T::from_f64(targets.len() as f64);
                let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    gx[i * n + t] -= scale;
                }
                accumulate(grads, *scores, shape, gx);
            }
            Op::Sum(input) => {
                let x = self.value(*input);
                accumulate(grads, *input, x.shape(), vec![g[0]; x.len()]);
            }
        }
        Ok(())
    }
}

fn matrix_dims<T: Float>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(format!("expected a matrix, got {:?}", t.shape()))),
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Tensor<T>>], id: NodeId, shape: &[usize], g: Vec<T>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), g).expect("gradient shape"));
        }
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::BatchNorm { .. } => "batchnorm",
        Op::Relu(_) => "relu",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Resize { .. } => "resize",
        Op::ChannelSoftmax(_) => "channel_softmax",
        Op::WeightedSum { .. } => "weighted_sum",
        Op::Concat(_) => "concat",
        Op::Gather { .. } => "gather",
        Op::GroupScores { .. } => "group_scores",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Sum(_) => "sum",
    }
}

/// Worst disagreement between the tape gradient and central differences of
/// a scalar function of several tensors.
///
/// Returns `max |analytic - (f(x+h) - f(x-h)) / 2h| / max(1, |analytic|)`
/// over every coordinate of every input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> + Sync,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let ids: Vec<NodeId> = xs.iter().map(|x| g.input(x.clone())).collect();
        let root = f(&mut g, &ids)?;
        Ok(g.value(root).item())
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let root = f(&mut g, &ids)?;
    g.backward(root)?;
    let analytic: Vec<Tensor<f64>> = ids.iter().map(|&id| g.grad(id)).collect();

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(t, x)| (0..x.len()).map(move |i| (t, i)))
        .collect();
    let errors = coords
        .par_iter()
        .map(|&(t, i)| -> Result<f64> {
            let mut xs = inputs.to_vec();
            let x0 = xs[t].data()[i];
            xs[t].data_mut()[i] = x0 + h;
            let plus = eval(&xs)?;
            xs[t].data_mut()[i] = x0 - h;
            let minus = eval(&xs)?;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[t].data()[i];
            Ok((a - numeric).abs() / a.abs().max(1.0))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(errors.into_iter().fold(0.0, f64::max))
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId> + Sync,
{
    grad_check_many(|g, ids| f(g, ids[0]), std::slice::from_ref(x), h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[0.0, 0.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[-1.0, 2.0]));
        let y = g.relu(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn sum_of_product_grad_is_other_factor() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[3], &[0.5, -1.0, 2.0]));
        let x = g.input(t(&[3], &[3.0, 4.0, 5.0]));
        let p = g.mul(w, x).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).data(), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn inner_product_grads_swap_operands() {
        let mut g = Graph::<f64>::new();
        let p = g.param(t(&[1, 2], &[1.0, 2.0]));
        let q = g.param(t(&[1, 2], &[3.0, 4.0]));
        let s = g.group_scores(p, q, 1).unwrap();
        assert_eq!(g.value(s).item(), 11.0);
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).data(), &[3.0, 4.0]);
        assert_eq!(g.grad(q).data(), &[1.0, 2.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2], &[1.0, 2.0]));
        let b = g.param(t(&[2], &[3.0, 4.0]));
        let s = g.sum(a).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2], &[1.0, 2.0]));
        let r = g.relu(a).unwrap();
        assert!(g.backward(r).is_err());
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_onehot() {
        let scores = [0.3, -1.2, 2.0, 0.0];
        let mut g = Graph::<f64>::new();
        let s = g.param(t(&[1, 4], &scores));
        let l = g.cross_entropy(s, &[1]).unwrap();
        g.backward(l).unwrap();
        let probs = softmax::cross_entropy(&scores, 1).1;
        for (i, (&gv, &p)) in g.grad(s).data().iter().zip(&probs).enumerate() {
            let expected = p - if i == 1 { 1.0 } else { 0.0 };
            assert!((gv - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn grad_check_simple_functions() {
        let x = t(&[2], &[1.0, 2.0]);
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");

        let x = t(&[4], &[-1.5, 0.7, 2.0, -0.2]);
        let err = grad_check(
            |g, x| {
                let r = g.relu(x)?;
                g.sum(r)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_composite_layers() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut rnd = |shape: &[usize]| {
            let n = shape.iter().product();
            t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
        };
        let inputs = vec![
            rnd(&[2, 5, 6]),
            rnd(&[3, 2, 3, 3]),
            rnd(&[3]),
            rnd(&[3]),
            rnd(&[3]),
            rnd(&[2, 3, 1, 1]),
            rnd(&[2]),
        ];
        let err = grad_check_many(
            |g, ids| {
                let c = g.conv2d(ids[0], ids[1], ids[2])?;
                let b = g.batchnorm(c, ids[3], ids[4], BnMode::Train { eps: 1e-5 })?;
                let small = g.resize(b, 3, 4)?;
                let back = g.resize(small, 5, 6)?;
                let logits = g.conv2d(back, ids[5], ids[6])?;
                let att = g.channel_softmax(logits)?;
                let fused = g.weighted_sum(&[b, back], att)?;
                let cat = g.concat(&[fused, b])?;
                let src = g.gather(cat, &[(1, 2)])?;
                let tgt = g.gather(cat, &[(0, 0), (4, 5), (1, 2), (2, 3)])?;
                let s = g.group_scores(src, tgt, 4)?;
                g.cross_entropy(s, &[2])
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
