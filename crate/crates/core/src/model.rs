//! The scale-attention network.
//!
//! Layout of the learnable weights:
//!
//! ```text
//! stem conv (C_in -> D, 3x3)
//! block0 .. block4        feature net; reused as the first five attention blocks
//! att_block0 .. att_block3  attention-only blocks
//! att_proj (D -> S, 1x1)  scale logits, then a per-pixel softmax
//! ```
//!
//! The feature net is stem + block0..block4 with the final relu of block4
//! dropped. The attention net reads the original image through the same
//! stem and shared blocks (block4 keeping its relu), then its own four blocks
//! (the last without relu) and the projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{BnMode, Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::batchnorm::BatchNormState;
use crate::nn::resize::ResizePlan;
use crate::tensor::{Float, Tensor};

pub const FEATURE_BLOCKS: usize = 5;
pub const ATTENTION_BLOCKS: usize = 4;

/// Scale sets named after the number of pyramid levels.
pub const SCALES_X1: [f64; 1] = [1.0];
pub const SCALES_X2: [f64; 2] = [1.0, 2.0];
pub const SCALES_X4: [f64; 4] = [0.5, 1.0, 1.5, 2.0];

/// How per-scale feature maps are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    /// Attention-weighted sum; output has `D` channels.
    Attention,
    /// Channel concatenation of all scales; output has `D * S` channels.
    Concat,
}

impl Fusion {
    pub fn code(self) -> u32 {
        match self {
            Fusion::Attention => 0,
            Fusion::Concat => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Fusion::Attention),
            1 => Some(Fusion::Concat),
            _ => None,
        }
    }
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Fusion::Attention),
            "concat" => Ok(Fusion::Concat),
            _ => Err(Error::Config(format!(
                "fusion must be `attention` or `concat`, got `{s}`"
            ))),
        }
    }
}

impl std::fmt::Display for Fusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Fusion::Attention => "attention",
            Fusion::Concat => "concat",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Feature width `D`.
    pub filters: usize,
    /// Down-sampling factors, strictly increasing (finest first).
    pub scales: Vec<f64>,
    pub fusion: Fusion,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            filters: 64,
            scales: SCALES_X2.to_vec(),
            fusion: Fusion::Attention,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.filters == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        validate_scales(&self.scales)
    }

    /// Channels of the fused descriptor.
    pub fn output_dim(&self) -> usize {
        match self.fusion {
            Fusion::Attention => self.filters,
            Fusion::Concat => self.filters * self.scales.len(),
        }
    }
}

pub fn validate_scales(scales: &[f64]) -> Result<()> {
    if scales.is_empty() {
        return Err(Error::invalid("scale list is empty"));
    }
    if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::invalid(format!("scale {s} is not positive")));
    }
    if scales.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!(
            "scales must be strictly increasing, got {scales:?}"
        )));
    }
    Ok(())
}

/// Pyramid extent for one scale: `ceil(extent / scale)`.
pub fn scaled_extent(extent: usize, scale: f64) -> usize {
    let v = extent as f64 / scale;
    // tolerate representation error in exact quotients such as 48 / 1.5
    let r = v.round();
    let e = if (v - r).abs() < 1e-9 { r } else { v.ceil() };
    (e as usize).max(1)
}

/// Indices of one convolution's weights and bias in [`ModelParams::tensors`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvRef {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnRef {
    pub gamma: usize,
    pub beta: usize,
    /// Index into [`ModelParams::bn_states`].
    pub state: usize,
}

/// conv-bn-relu-conv-bn with an identity shortcut.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockRef {
    pub conv1: ConvRef,
    pub bn1: BnRef,
    pub conv2: ConvRef,
    pub bn2: BnRef,
}

/// All learnable weights plus batchnorm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Float = f32> {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor<T>>,
    pub names: Vec<String>,
    pub bn_states: Vec<BatchNormState<T>>,
    pub bn_names: Vec<String>,
    pub stem: ConvRef,
    pub feature_blocks: Vec<BlockRef>,
    /// The first five attention blocks. These are the feature blocks
    /// themselves, so both networks read and update the same storage.
    pub attention_shared: Vec<BlockRef>,
    pub attention_blocks: Vec<BlockRef>,
    pub projection: ConvRef,
}

struct Builder<T: Float> {
    tensors: Vec<Tensor<T>>,
    names: Vec<String>,
    bn_states: Vec<BatchNormState<T>>,
    bn_names: Vec<String>,
}

impl<T: Float> Builder<T> {
    fn tensor(&mut self, name: String, t: Tensor<T>) -> usize {
        self.tensors.push(t);
        self.names.push(name);
        self.tensors.len() - 1
    }

    fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize) -> ConvRef {
        ConvRef {
            weight: self.tensor(format!("{name}.weight"), Tensor::zeros([out, inp, k, k])),
            bias: self.tensor(format!("{name}.bias"), Tensor::zeros([out])),
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> BnRef {
        let gamma = self.tensor(format!("{name}.gamma"), Tensor::full([c], T::one()));
        let beta = self.tensor(format!("{name}.beta"), Tensor::zeros([c]));
        self.bn_states.push(BatchNormState::new(c));
        self.bn_names.push(name.to_string());
        BnRef {
            gamma,
            beta,
            state: self.bn_states.len() - 1,
        }
    }

    fn block(&mut self, name: &str, d: usize) -> BlockRef {
        BlockRef {
            conv1: self.conv(&format!("{name}.conv1"), d, d, 3),
            bn1: self.bn(&format!("{name}.bn1"), d),
            conv2: self.conv(&format!("{name}.conv2"), d, d, 3),
            bn2: self.bn(&format!("{name}.bn2"), d),
        }
    }
}

/// Scale of the shortcut-branch output at initialization. Small values keep
/// every block close to identity so that initial descriptors, and with them
/// the initial match scores, stay in a moderate range.
const BRANCH_GAMMA_INIT: f64 = 0.1;
/// Stem weights are drawn with standard deviation `STEM_GAIN / sqrt(fan_in)`.
const STEM_GAIN: f64 = 0.5;

impl<T: Float> ModelParams<T> {
    /// Structure with all-zero convolutions, unit batchnorm scales and unit
    /// running variances.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.filters;
        let s = config.scales.len();
        let mut b = Builder {
            tensors: Vec::new(),
            names: Vec::new(),
            bn_states: Vec::new(),
            bn_names: Vec::new(),
        };
        let stem = b.conv("stem", d, config.in_channels, 3);
        let feature_blocks: Vec<BlockRef> = (0..FEATURE_BLOCKS).map(|i| b.block(&format!("block{i}"), d)).collect();
        let attention_blocks = (0..ATTENTION_BLOCKS)
            .map(|i| b.block(&format!("att_block{i}"), d))
            .collect();
        let projection = b.conv("att_proj", s, d, 1);
        Ok(ModelParams {
            config,
            tensors: b.tensors,
            names: b.names,
            bn_states: b.bn_states,
            bn_names: b.bn_names,
            stem,
            attention_shared: feature_blocks.clone(),
            feature_blocks,
            attention_blocks,
            projection,
        })
    }

    /// He-normal convolutions, zero biases, unit batchnorm scales except the
    /// second batchnorm of each block.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs: Vec<(ConvRef, f64)> = std::iter::once((m.stem, STEM_GAIN))
            .chain(
                m.feature_blocks
                    .iter()
                    .chain(&m.attention_blocks)
                    .flat_map(|b| [(b.conv1, 2f64.sqrt()), (b.conv2, 2f64.sqrt())]),
            )
            .chain(std::iter::once((m.projection, 0.1)))
            .collect();
        for (conv, gain) in convs {
            let w = &mut m.tensors[conv.weight];
            let fan_in: usize = w.shape()[1..].iter().product();
            let normal = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("finite std");
            for v in w.data_mut() {
                *v = T::from_f64(normal.sample(&mut rng));
            }
        }
        let branch_ends: Vec<usize> = m
            .feature_blocks
            .iter()
            .chain(&m.attention_blocks)
            .map(|b| b.bn2.gamma)
            .collect();
        for idx in branch_ends {
            m.tensors[idx] = m.tensors[idx].map(|_| T::from_f64(BRANCH_GAMMA_INIT));
        }
        Ok(m)
    }

    pub fn scales(&self) -> &[f64] {
        &self.config.scales
    }

    pub fn num_scales(&self) -> usize {
        self.config.scales.len()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn cast<U: Float>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            names: self.names.clone(),
            bn_states: self.bn_states.iter().map(|s| s.cast()).collect(),
            bn_names: self.bn_names.clone(),
            stem: self.stem,
            feature_blocks: self.feature_blocks.clone(),
            attention_shared: self.attention_shared.clone(),
            attention_blocks: self.attention_blocks.clone(),
            projection: self.projection,
        }
    }

    /// Folds train-mode batch statistics recorded during a forward pass into
    /// the running statistics, in recording order.
    pub fn absorb_batch_stats(&mut self, graph: &Graph<T>, observed: &[(usize, NodeId)]) {
        for &(state, node) in observed {
            if let Some((mean, var)) = graph.batch_stats(node) {
                self.bn_states[state].absorb(mean, var);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batchnorm uses per-map statistics (recorded for the running update).
    Train,
    /// Batchnorm uses running statistics.
    Infer,
}

/// One binding of a model's weights into a graph.
pub struct Forward<'m, T: Float> {
    model: &'m ModelParams<T>,
    leaves: Vec<NodeId>,
    mode: Mode,
    observed: Vec<(usize, NodeId)>,
}

impl<'m, T: Float> Forward<'m, T> {
    /// Inserts every weight tensor as a trainable leaf.
    pub fn bind(model: &'m ModelParams<T>, graph: &mut Graph<T>, mode: Mode) -> Self {
        let leaves = model.tensors.iter().map(|t| graph.param(t.clone())).collect();
        Self::with_leaves(model, leaves, mode)
    }

    /// Uses caller-provided leaves, one per entry of `model.tensors`.
    pub fn with_leaves(model: &'m ModelParams<T>, leaves: Vec<NodeId>, mode: Mode) -> Self {
        assert_eq!(leaves.len(), model.tensors.len(), "one leaf per weight tensor");
        Forward {
            model,
            leaves,
            mode,
            observed: Vec::new(),
        }
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn model(&self) -> &ModelParams<T> {
        self.model
    }

    /// Batchnorm nodes that ran in train mode, with their state index.
    pub fn observed(&self) -> &[(usize, NodeId)] {
        &self.observed
    }

    pub fn into_observed(self) -> Vec<(usize, NodeId)> {
        self.observed
    }

    fn conv(&self, g: &mut Graph<T>, x: NodeId, c: ConvRef) -> Result<NodeId> {
        g.conv2d(x, self.leaves[c.weight], self.leaves[c.bias])
    }

    fn bn(&mut self, g: &mut Graph<T>, x: NodeId, b: BnRef) -> Result<NodeId> {
        let state = &self.model.bn_states[b.state];
        let mode = match self.mode {
            Mode::Train => BnMode::Train { eps: state.eps },
            Mode::Infer => BnMode::Infer(state),
        };
        let id = g.batchnorm(x, self.leaves[b.gamma], self.leaves[b.beta], mode)?;
        if self.mode == Mode::Train {
            self.observed.push((b.state, id));
        }
        Ok(id)
    }

    /// `relu(x + bn(conv(relu(bn(conv(x))))))`, or without the outer relu.
    pub fn residual_block(
        &mut self,
        g: &mut Graph<T>,
        x: NodeId,
        block: &BlockRef,
        final_relu: bool,
    ) -> Result<NodeId> {
        let h = self.conv(g, x, block.conv1)?;
        let h = self.bn(g, h, block.bn1)?;
        let h = g.relu(h)?;
        let h = self.conv(g, h, block.conv2)?;
        let h = self.bn(g, h, block.bn2)?;
        let sum = g.add(x, h)?;
        if final_relu {
            g.relu(sum)
        } else {
            Ok(sum)
        }
    }

    fn check_input(&self, g: &Graph<T>, image: NodeId) -> Result<(usize, usize)> {
        let (c, h, w) = g.value(image).chw()?;
        if c != self.model.config.in_channels {
            return Err(Error::shape(format!(
                "model expects {} input channels, image has {c}",
                self.model.config.in_channels
            )));
        }
        Ok((h, w))
    }

    /// Single-scale descriptor map: stem and the five feature blocks, the
    /// last one without its relu. `D x h x w`.
    pub fn feature_forward(&mut self, g: &mut Graph<T>, image: NodeId) -> Result<NodeId> {
        self.check_input(g, image)?;
        let mut x = self.conv(g, image, self.model.stem)?;
        let blocks = self.model.feature_blocks.clone();
        for (i, block) in blocks.iter().enumerate() {
            x = self.residual_block(g, x, block, i + 1 < blocks.len())?;
        }
        Ok(x)
    }

    /// Attention head applied to the (relu-less) output of the shared trunk.
    fn attention_head(&mut self, g: &mut Graph<T>, trunk: NodeId) -> Result<NodeId> {
        // the shared block4 keeps its relu inside the attention net
        let mut x = g.relu(trunk)?;
        let blocks = self.model.attention_blocks.clone();
        for (i, block) in blocks.iter().enumerate() {
            x = self.residual_block(g, x, block, i + 1 < blocks.len())?;
        }
        let logits = self.conv(g, x, self.model.projection)?;
        g.channel_softmax(logits)
    }

    /// Per-pixel weights over the scales, `S x H x W`, each pixel on the
    /// probability simplex.
    pub fn attention_forward(&mut self, g: &mut Graph<T>, image: NodeId) -> Result<NodeId> {
        let trunk = self.feature_forward(g, image)?;
        self.attention_head(g, trunk)
    }

    /// Fused `output_dim x H x W` descriptor map of the full network.
    pub fn multiscale_features(&mut self, g: &mut Graph<T>, image: NodeId) -> Result<NodeId> {
        let (h, w) = self.check_input(g, image)?;
        let scales = self.model.config.scales.clone();
        let mut upsampled = Vec::with_capacity(scales.len());
        let mut full_res_trunk = None;
        for &s in &scales {
            let (sh, sw) = (scaled_extent(h, s), scaled_extent(w, s));
            let level = if (sh, sw) == (h, w) {
                image
            } else {
                g.resize(image, sh, sw)?
            };
            let f = self.feature_forward(g, level)?;
            if (sh, sw) == (h, w) {
                full_res_trunk = Some(f);
            }
            let up = if (sh, sw) == (h, w) { f } else { g.resize(f, h, w)? };
            upsampled.push(up);
        }
        match self.model.config.fusion {
            Fusion::Concat => g.concat(&upsampled),
            Fusion::Attention if scales.len() == 1 => Ok(upsampled[0]),
            Fusion::Attention => {
                // the feature trunk on the unresized image is exactly the
                // attention trunk, so reuse it when a scale maps to 1:1
                let trunk = match full_res_trunk {
                    Some(t) => t,
                    None => self.feature_forward(g, image)?,
                };
                let att = self.attention_head(g, trunk)?;
                g.weighted_sum(&upsampled, att)
            }
        }
    }
}

/// Resizes `image` once per scale to `ceil(H/s) x ceil(W/s)`.
pub fn build_pyramid<T: Float>(image: &Tensor<T>, scales: &[f64]) -> Result<Vec<Tensor<T>>> {
    if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::invalid(format!("scale {s} is not positive")));
    }
    let (c, h, w) = image.chw()?;
    scales
        .iter()
        .map(|&s| {
            let (sh, sw) = (scaled_extent(h, s), scaled_extent(w, s));
            let plan = ResizePlan::new(h, w, sh, sw)?;
            Tensor::new([c, sh, sw], plan.forward(image.data(), c))
        })
        .collect()
}

/// Per-pixel scale weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub weights: Tensor<f32>,
}

impl AttentionMap {
    pub fn new(weights: Tensor<f32>) -> Result<Self> {
        let (s, h, w) = weights.chw()?;
        let n = h * w;
        let data = weights.data();
        for p in 0..n {
            let mut total = 0.0f64;
            for c in 0..s {
                let v = data[c * n + p];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::invalid(format!("attention weight {v} outside [0, 1]")));
                }
                total += v as f64;
            }
            if (total - 1.0).abs() > 1e-5 {
                return Err(Error::invalid(format!("attention weights sum to {total}")));
            }
        }
        Ok(AttentionMap { weights })
    }

    pub fn num_scales(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.weights.shape()[2]
    }
}

impl ModelParams<f32> {
    /// Fused descriptors of one image, no gradient tape.
    pub fn features(&self, image: &Tensor<f32>, mode: Mode) -> Result<Tensor<f32>> {
        let mut g = Graph::inference();
        let x = g.input(image.clone());
        let mut fwd = Forward::bind(self, &mut g, mode);
        let out = fwd.multiscale_features(&mut g, x)?;
        Ok(g.take_value(out))
    }

    pub fn attention(&self, image: &Tensor<f32>, mode: Mode) -> Result<AttentionMap> {
        let mut g = Graph::inference();
        let x = g.input(image.clone());
        let mut fwd = Forward::bind(self, &mut g, mode);
        let out = fwd.attention_forward(&mut g, x)?;
        AttentionMap::new(g.take_value(out))
    }

    pub fn single_scale_features(&self, image: &Tensor<f32>, mode: Mode) -> Result<Tensor<f32>> {
        let mut g = Graph::inference();
        let x = g.input(image.clone());
        let mut fwd = Forward::bind(self, &mut g, mode);
        let out = fwd.feature_forward(&mut g, x)?;
        Ok(g.take_value(out))
    }
}
