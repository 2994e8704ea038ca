//! Triplet sampling, Nesterov SGD, the step learning-rate schedule and the
//! siamese training loop.

use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::eval;
use crate::flow::FlowField;
use crate::io::image::normalize;
use crate::io::{self, SynthConfig};
use crate::matcher::{FeatureMap, Pixel};
use crate::model::{Forward, Mode, ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const DEFAULT_NEGATIVES: usize = 200;
pub const DEFAULT_BASE_LR: f64 = 0.002;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_LR_FACTOR: f64 = 5.0;
pub const DEFAULT_LR_STEP: u64 = 50_000;

/// Search region around a source pixel, possibly asymmetric.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchWindow {
    pub up: usize,
    pub down: usize,
    pub left: usize,
    pub right: usize,
}

impl SearchWindow {
    pub fn symmetric(radius_y: usize, radius_x: usize) -> Self {
        SearchWindow {
            up: radius_y,
            down: radius_y,
            left: radius_x,
            right: radius_x,
        }
    }

    /// Pixels in the unclipped window.
    pub fn area(&self) -> usize {
        (self.up + self.down + 1) * (self.left + self.right + 1)
    }

    /// Window around `p`, clipped to `height x width`, row-major.
    pub fn pixels(&self, p: Pixel, height: usize, width: usize) -> impl Iterator<Item = Pixel> {
        let (r0, r1) = (p.0.saturating_sub(self.up), (p.0 + self.down).min(height - 1));
        let (c0, c1) = (p.1.saturating_sub(self.left), (p.1 + self.right).min(width - 1));
        (r0..=r1).flat_map(move |r| (c0..=c1).map(move |c| (r, c)))
    }

    fn clipped_area(&self, p: Pixel, height: usize, width: usize) -> usize {
        let rows = (p.0 + self.down).min(height - 1) - p.0.saturating_sub(self.up) + 1;
        let cols = (p.1 + self.right).min(width - 1) - p.1.saturating_sub(self.left) + 1;
        rows * cols
    }

    fn contains(&self, p: Pixel, q: Pixel) -> bool {
        let dy = q.0 as isize - p.0 as isize;
        let dx = q.1 as isize - p.1 as isize;
        -(self.up as isize) <= dy
            && dy <= self.down as isize
            && -(self.left as isize) <= dx
            && dx <= self.right as isize
    }
}

/// One source pixel, its ground-truth match and sampled negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingTriplet {
    /// Index of the image pair the positions refer to.
    pub pair: usize,
    pub source: Pixel,
    pub target: Pixel,
    pub negatives: Vec<Pixel>,
    /// Position of the ground truth in [`TrainingTriplet::candidates`].
    pub gt_slot: usize,
}

impl TrainingTriplet {
    /// Negatives with the ground truth inserted at `gt_slot`.
    pub fn candidates(&self) -> Vec<Pixel> {
        let mut c = self.negatives.clone();
        c.insert(self.gt_slot, self.target);
        c
    }
}

fn round_target(p: Pixel, flow: &FlowField) -> Option<Pixel> {
    let (u, v) = flow.at(p.0, p.1);
    let r = (p.0 as f32 + v).round();
    let c = (p.1 as f32 + u).round();
    if r < 0.0 || c < 0.0 || r >= flow.height as f32 || c >= flow.width as f32 {
        None
    } else {
        Some((r as usize, c as usize))
    }
}

/// Draws `n_pairs` source pixels uniformly (without replacement) from the
/// valid ground-truth pixels, and for each `n_neg` distinct negatives from
/// the search window around the source, excluding the ground-truth target.
///
/// A source is eligible when its rounded target lies inside its window and
/// the clipped window holds at least `n_neg + 1` pixels.
pub fn sample_triplets(
    flow: &FlowField,
    n_pairs: usize,
    n_neg: usize,
    window: SearchWindow,
    seed: u64,
) -> Result<Vec<TrainingTriplet>> {
    if window.area() < n_neg + 1 {
        return Err(Error::invalid(format!(
            "search window of {} pixels cannot supply {n_neg} distinct negatives",
            window.area()
        )));
    }
    let (h, w) = (flow.height, flow.width);
    let eligible: Vec<(Pixel, Pixel)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&p| flow.valid[flow.index(p.0, p.1)])
        .filter_map(|p| round_target(p, flow).map(|q| (p, q)))
        .filter(|&(p, q)| window.contains(p, q) && window.clipped_area(p, h, w) > n_neg)
        .collect();
    if eligible.len() < n_pairs {
        return Err(Error::invalid(format!(
            "only {} usable ground-truth pixels for {n_pairs} pairs",
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = index::sample(&mut rng, eligible.len(), n_pairs);
    let mut out = Vec::with_capacity(n_pairs);
    for i in chosen.iter() {
        let (source, target) = eligible[i];
        let pool: Vec<Pixel> = window.pixels(source, h, w).filter(|&q| q != target).collect();
        let negatives = index::sample(&mut rng, pool.len(), n_neg)
            .iter()
            .map(|j| pool[j])
            .collect();
        let gt_slot = rng.random_range(0..=n_neg);
        out.push(TrainingTriplet {
            pair: 0,
            source,
            target,
            negatives,
            gt_slot,
        });
    }
    Ok(out)
}

/// `base / factor^floor(iter / step)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub factor: f64,
    pub step: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base: DEFAULT_BASE_LR,
            factor: DEFAULT_LR_FACTOR,
            step: DEFAULT_LR_STEP,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, iter: u64) -> f64 {
        self.base / self.factor.powi((iter / self.step) as i32)
    }
}

/// Step schedule with the default factor and step length.
pub fn lr_schedule(iter: u64, base: f64) -> f64 {
    LrSchedule {
        base,
        ..LrSchedule::default()
    }
    .at(iter)
}

/// Momentum buffers for [`nesterov_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub velocity: Vec<Tensor<f32>>,
    pub iteration: u64,
    pub base_lr: f32,
    pub momentum: f32,
}

impl OptimState {
    pub fn new(params: &[Tensor<f32>], base_lr: f32, momentum: f32) -> Self {
        OptimState {
            velocity: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            iteration: 0,
            base_lr,
            momentum,
        }
    }
}

/// `v <- mu v + g; w <- w - lr (g + mu v)`. Nothing is modified when a
/// shape disagrees or a gradient is not finite.
pub fn nesterov_step(params: &mut [Tensor<f32>], grads: &[Tensor<f32>], state: &mut OptimState, lr: f32) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(&state.velocity).enumerate() {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(format!(
                "parameter {i}: {:?}, gradient {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    let mu = state.momentum;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = mu * *vi + gi;
            *w -= lr * (gi + mu * *vi);
        }
    }
    state.iteration += 1;
    Ok(())
}

/// Source and target images in `[0, 1]` with ground-truth flow on the
/// source grid.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub source: Tensor<f32>,
    pub target: Tensor<f32>,
    pub flow: FlowField,
}

pub trait Dataset {
    /// `None` for generators that never run out.
    fn len(&self) -> Option<usize>;

    fn pair(&self, index: usize) -> Result<TrainingPair>;

    fn is_empty(&self) -> bool {
        self.len() == Some(0)
    }
}

/// Mixes a stream id and an index into a seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Endless stream of generated pairs; `stream` separates training from
/// held-out data drawn with the same seed.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub config: SynthConfig,
    pub seed: u64,
    pub stream: u64,
}

impl Dataset for SyntheticDataset {
    fn len(&self) -> Option<usize> {
        None
    }

    fn pair(&self, index: usize) -> Result<TrainingPair> {
        let p = io::synth_pair(&self.config, derive_seed(self.seed, self.stream, index as u64))?;
        Ok(TrainingPair {
            source: p.source,
            target: p.target,
            flow: p.flow,
        })
    }
}

/// Pairs read from `(source image, target image, ground-truth .flo)` paths.
#[derive(Clone, Debug)]
pub struct FileDataset {
    pub entries: Vec<(PathBuf, PathBuf, PathBuf)>,
    pub gray: bool,
}

impl FileDataset {
    /// Reads a list file with one whitespace-separated triple per line.
    pub fn from_list(path: &Path, gray: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::Config(format!(
                    "{}:{}: expected `source target flow`",
                    path.display(),
                    n + 1
                )));
            }
            entries.push((base.join(parts[0]), base.join(parts[1]), base.join(parts[2])));
        }
        Ok(FileDataset { entries, gray })
    }
}

impl Dataset for FileDataset {
    fn len(&self) -> Option<usize> {
        Some(self.entries.len())
    }

    fn pair(&self, index: usize) -> Result<TrainingPair> {
        let (s, t, f) = &self.entries[index];
        Ok(TrainingPair {
            source: io::read_pnm(s)?.to_tensor(self.gray),
            target: io::read_pnm(t)?.to_tensor(self.gray),
            flow: io::read_flo(f)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub negatives: usize,
    pub window: SearchWindow,
    /// Triplets per step.
    pub batch: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub iterations: u64,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0: final only).
    pub checkpoint_interval: u64,
    /// Validate every this many steps (0: never during training).
    pub validation_interval: u64,
    pub validation_pairs: usize,
    pub validation_triplets: usize,
    pub synth: SynthConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            negatives: DEFAULT_NEGATIVES,
            window: SearchWindow::symmetric(8, 8),
            batch: 32,
            lr: LrSchedule::default(),
            momentum: DEFAULT_MOMENTUM,
            iterations: 1000,
            seed: 0,
            checkpoint_interval: 0,
            validation_interval: 0,
            validation_pairs: 4,
            validation_triplets: 64,
            synth: SynthConfig::default(),
        }
    }
}

/// Held-out pairs with fixed triplets.
pub struct ValidationSet {
    pub pairs: Vec<TrainingPair>,
    pub triplets: Vec<TrainingTriplet>,
}

impl ValidationSet {
    pub fn build(dataset: &dyn Dataset, config: &TrainConfig, seed: u64) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut triplets = Vec::new();
        for i in 0..config.validation_pairs {
            let pair = dataset.pair(i)?;
            let mut t = sample_triplets(
                &pair.flow,
                config.validation_triplets,
                config.negatives,
                config.window,
                derive_seed(seed, 3, i as u64),
            )?;
            t.iter_mut().for_each(|t| t.pair = i);
            triplets.extend(t);
            pairs.push(pair);
        }
        Ok(ValidationSet { pairs, triplets })
    }

    pub fn top1(&self, model: &ModelParams<f32>) -> Result<f64> {
        let feats = self
            .pairs
            .iter()
            .map(|p| {
                Ok((
                    FeatureMap::from_chw(&model.features(&normalize(&p.source), Mode::Infer)?)?,
                    FeatureMap::from_chw(&model.features(&normalize(&p.target), Mode::Infer)?)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        eval::top1_accuracy_multi(&self.triplets, &feats)
    }
}

/// Cross-entropy over each triplet's candidates, averaged over the batch.
pub fn siamese_loss<T: crate::tensor::Float>(
    g: &mut Graph<T>,
    source_features: NodeId,
    target_features: NodeId,
    triplets: &[TrainingTriplet],
) -> Result<NodeId> {
    if triplets.is_empty() {
        return Err(Error::invalid("empty triplet batch"));
    }
    let group = triplets[0].negatives.len() + 1;
    if triplets.iter().any(|t| t.negatives.len() + 1 != group) {
        return Err(Error::invalid("triplets in one batch must have equal candidate counts"));
    }
    let sources: Vec<Pixel> = triplets.iter().map(|t| t.source).collect();
    let candidates: Vec<Pixel> = triplets.iter().flat_map(|t| t.candidates()).collect();
    let slots: Vec<usize> = triplets.iter().map(|t| t.gt_slot).collect();
    let src = g.gather(source_features, &sources)?;
    let tgt = g.gather(target_features, &candidates)?;
    let scores = g.group_scores(src, tgt, group)?;
    g.cross_entropy(scores, &slots)
}

/// Forward, backward, running-stat update and optimizer step on one batch.
/// Returns the batch loss.
pub fn train_step(
    model: &mut ModelParams<f32>,
    optim: &mut OptimState,
    pair: &TrainingPair,
    triplets: &[TrainingTriplet],
    lr: f32,
) -> Result<f64> {
    let mut g = Graph::new();
    let src = g.input(normalize(&pair.source));
    let tgt = g.input(normalize(&pair.target));
    let (loss, leaves, observed) = {
        let mut fwd = Forward::bind(model, &mut g, Mode::Train);
        let fs = fwd.multiscale_features(&mut g, src)?;
        let ft = fwd.multiscale_features(&mut g, tgt)?;
        let loss = siamese_loss(&mut g, fs, ft, triplets)?;
        let leaves = fwd.leaves().to_vec();
        (loss, leaves, fwd.into_observed())
    };
    let value = g.value(loss).item() as f64;
    g.backward(loss)?;
    let grads: Vec<Tensor<f32>> = leaves.iter().map(|&id| g.grad(id)).collect();
    model.absorb_batch_stats(&g, &observed);
    nesterov_step(&mut model.tensors, &grads, optim, lr)?;
    Ok(value)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
    pub val_top1: Option<f64>,
}

pub struct TrainOutcome {
    pub model: ModelParams<f32>,
    pub optim: OptimState,
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs `config.iterations` steps. Step `i` uses dataset pair
/// `i mod len` and a fresh triplet batch drawn from its ground truth.
/// Checkpoints go to `out_dir` when given.
pub fn train_loop(
    config: &TrainConfig,
    dataset: &dyn Dataset,
    validation: Option<&ValidationSet>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut model = ModelParams::init(config.model.clone(), derive_seed(config.seed, 0, 0))?;
    let mut optim = OptimState::new(&model.tensors, config.lr.base as f32, config.momentum as f32);
    train_from(config, dataset, validation, out_dir, &mut model, &mut optim).map(|(log, checkpoints)| TrainOutcome {
        model,
        optim,
        log,
        checkpoints,
    })
}

/// Continues training an existing model from `optim.iteration`.
pub fn train_from(
    config: &TrainConfig,
    dataset: &dyn Dataset,
    validation: Option<&ValidationSet>,
    out_dir: Option<&Path>,
    model: &mut ModelParams<f32>,
    optim: &mut OptimState,
) -> Result<(Vec<LogRow>, Vec<PathBuf>)> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset exhausted: no training pairs"));
    }
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let save = |model: &ModelParams<f32>, optim: &OptimState, name: String, list: &mut Vec<PathBuf>| {
        if let Some(dir) = out_dir {
            let path = dir.join(name);
            io::save_checkpoint(&path, model, Some(optim))?;
            list.push(path);
        }
        Ok::<_, Error>(())
    };
    while optim.iteration < config.iterations {
        let it = optim.iteration;
        let index = match dataset.len() {
            Some(n) => (it % n as u64) as usize,
            None => it as usize,
        };
        let pair = dataset.pair(index)?;
        let triplets = sample_triplets(
            &pair.flow,
            config.batch,
            config.negatives,
            config.window,
            derive_seed(config.seed, 2, it),
        )?;
        let lr = config.lr.at(it);
        let loss = train_step(model, optim, &pair, &triplets, lr as f32).map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("{what} at iteration {it}")),
            other => other,
        })?;
        let done = optim.iteration;
        let val_top1 = match validation {
            Some(v) if config.validation_interval > 0 && done.is_multiple_of(config.validation_interval) => {
                Some(v.top1(model)?)
            }
            _ => None,
        };
        log.push(LogRow {
            iteration: it,
            lr,
            loss,
            val_top1,
        });
        if config.checkpoint_interval > 0 && done.is_multiple_of(config.checkpoint_interval) {
            save(model, optim, format!("checkpoint_{done:07}.ascm"), &mut checkpoints)?;
        }
    }
    save(model, optim, "model.ascm".to_string(), &mut checkpoints)?;
    Ok((log, checkpoints))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_breakpoints() {
        assert_eq!(lr_schedule(0, 0.002), 0.002);
        assert_eq!(lr_schedule(49_999, 0.002), 0.002);
        assert_eq!(lr_schedule(50_000, 0.002), 0.002 / 5.0);
        assert!((lr_schedule(50_000, 0.002) - 0.0004).abs() < 1e-18);
        assert!((lr_schedule(100_000, 0.002) - 0.00008).abs() < 1e-18);
    }

    #[test]
    fn schedule_is_piecewise_constant_and_non_increasing() {
        let mut prev = f64::INFINITY;
        for it in (0..400_000).step_by(2_500) {
            let lr = lr_schedule(it, 0.002);
            assert!(lr <= prev);
            if it % 50_000 != 0 && it > 0 {
                assert_eq!(lr, lr_schedule(it - 2_500, 0.002));
            }
            prev = lr;
        }
    }

    fn one(v: f32) -> Vec<Tensor<f32>> {
        vec![Tensor::scalar(v)]
    }

    #[test]
    fn nesterov_reference_values() {
        let mut w = one(0.0);
        let mut s = OptimState::new(&w, 0.1, 0.9);
        nesterov_step(&mut w, &one(1.0), &mut s, 0.1).unwrap();
        assert_eq!(s.velocity[0].item(), 1.0);
        assert!((w[0].item() + 0.19).abs() < 1e-7);
        assert_eq!(s.iteration, 1);
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut w = one(2.0);
        let mut s = OptimState::new(&w, 0.5, 0.0);
        nesterov_step(&mut w, &one(3.0), &mut s, 0.5).unwrap();
        assert_eq!(w[0].item(), 0.5);
    }

    #[test]
    fn momentum_coasts_on_zero_gradient() {
        let mut w = one(1.0);
        let mut s = OptimState::new(&w, 0.1, 0.9);
        s.velocity[0] = Tensor::scalar(2.0);
        nesterov_step(&mut w, &one(0.0), &mut s, 0.1).unwrap();
        assert!((s.velocity[0].item() - 1.8).abs() < 1e-7);
        assert!((w[0].item() - (1.0 - 0.1 * 0.9 * 1.8)).abs() < 1e-7);
    }

    #[test]
    fn nesterov_rejects_bad_input_without_mutation() {
        let mut w = one(1.0);
        let mut s = OptimState::new(&w, 0.1, 0.9);
        assert!(nesterov_step(&mut w, &one(f32::NAN), &mut s, 0.1).is_err());
        assert!(nesterov_step(&mut w, &[Tensor::zeros([2])], &mut s, 0.1).is_err());
        assert_eq!(w[0].item(), 1.0);
        assert_eq!(s.iteration, 0);
    }

    #[test]
    fn triplets_are_deterministic_and_well_formed() {
        let flow = FlowField::constant(20, 20, 2.0, -1.0);
        let win = SearchWindow::symmetric(4, 4);
        let a = sample_triplets(&flow, 10, 30, win, 9).unwrap();
        assert_eq!(a, sample_triplets(&flow, 10, 30, win, 9).unwrap());
        for t in &a {
            assert_eq!(t.target, (t.source.0 - 1, t.source.1 + 2));
            assert_eq!(t.negatives.len(), 30);
            assert!(!t.negatives.contains(&t.target));
            let mut uniq = t.negatives.clone();
            uniq.sort();
            uniq.dedup();
            assert_eq!(uniq.len(), 30);
            assert_eq!(t.candidates()[t.gt_slot], t.target);
        }
    }

    #[test]
    fn exhausting_the_window_takes_every_other_pixel() {
        let flow = FlowField::constant(12, 12, 0.0, 0.0);
        let win = SearchWindow::symmetric(1, 1);
        for t in sample_triplets(&flow, 5, 8, win, 1).unwrap() {
            assert_eq!(t.target, t.source);
            let mut n = t.negatives.clone();
            n.sort();
            let expected: Vec<Pixel> = win.pixels(t.source, 12, 12).filter(|&q| q != t.source).collect();
            assert_eq!(n, expected);
        }
    }

    #[test]
    fn too_small_window_is_an_error() {
        let flow = FlowField::constant(12, 12, 0.0, 0.0);
        assert!(sample_triplets(&flow, 1, 9, SearchWindow::symmetric(1, 1), 0).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 1, 0));
        assert_eq!(derive_seed(7, 2, 3), derive_seed(7, 2, 3));
    }
}
