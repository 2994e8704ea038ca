//! Matching metrics: top-1 accuracy over candidate sets and PCK.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matcher::{argmax, score_candidates, FeatureMap};
use crate::trainer::TrainingTriplet;

/// Whether the best-scoring candidate of `t` is its ground truth.
fn hit(t: &TrainingTriplet, source: &FeatureMap, target: &FeatureMap) -> Result<bool> {
    let cands = t.candidates();
    let scores = score_candidates(source.at(t.source), &target.gather(&cands))?;
    Ok(argmax(&scores.0).map(|(i, _)| i) == Some(t.gt_slot))
}

/// Fraction of triplets whose best match is the ground truth, all on one
/// image pair.
pub fn top1_accuracy(triplets: &[TrainingTriplet], source: &FeatureMap, target: &FeatureMap) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::invalid("top-1 accuracy over an empty triplet list"));
    }
    let mut hits = 0usize;
    for t in triplets {
        hits += hit(t, source, target)? as usize;
    }
    Ok(hits as f64 / triplets.len() as f64)
}

/// As [`top1_accuracy`], with `features[t.pair]` holding each triplet's
/// `(source, target)` maps.
pub fn top1_accuracy_multi(triplets: &[TrainingTriplet], features: &[(FeatureMap, FeatureMap)]) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::invalid("top-1 accuracy over an empty triplet list"));
    }
    let mut hits = 0usize;
    for t in triplets {
        let (s, g) = features
            .get(t.pair)
            .ok_or_else(|| Error::invalid(format!("triplet refers to pair {} of {}", t.pair, features.len())))?;
        hits += hit(t, s, g)? as usize;
    }
    Ok(hits as f64 / triplets.len() as f64)
}

/// One annotated keypoint. Positions are `(x, y)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeypointPair {
    pub source: (f64, f64),
    pub target: (f64, f64),
    pub predicted: (f64, f64),
    pub visible: bool,
}

impl KeypointPair {
    pub fn error(&self) -> f64 {
        (self.predicted.0 - self.target.0).hypot(self.predicted.1 - self.target.1)
    }
}

/// Mean of the two image diagonals.
pub fn pck_length(src_w: f64, src_h: f64, tgt_w: f64, tgt_h: f64) -> f64 {
    0.5 * (src_w.hypot(src_h) + tgt_w.hypot(tgt_h))
}

/// Fraction of visible keypoints predicted within `alpha * length`
/// (inclusive).
pub fn pck(pairs: &[KeypointPair], alpha: f64, length: f64) -> Result<f64> {
    let scaled: Vec<(KeypointPair, f64)> = pairs.iter().map(|&p| (p, length)).collect();
    pck_scaled(&scaled, alpha)
}

/// PCK where every keypoint carries the reference length of its image pair.
pub fn pck_scaled(pairs: &[(KeypointPair, f64)], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    let visible: Vec<_> = pairs.iter().filter(|(p, _)| p.visible).collect();
    if visible.is_empty() {
        return Err(Error::invalid("no visible keypoints"));
    }
    let correct = visible.iter().filter(|(p, l)| p.error() <= alpha * l).count();
    Ok(correct as f64 / visible.len() as f64)
}

/// `0.01, 0.02, ..., 0.10`.
pub fn default_alphas() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 100.0).collect()
}

pub fn pck_curve(pairs: &[(KeypointPair, f64)], alphas: &[f64]) -> Result<Vec<(f64, f64)>> {
    alphas.iter().map(|&a| Ok((a, pck_scaled(pairs, a)?))).collect()
}

/// Writes `alpha,pck` rows.
pub fn write_pck_csv(out: impl Write, curve: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["alpha", "pck"])?;
    for (a, v) in curve {
        w.write_record([a.to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(Path::new("<csv>"), e))?;
    Ok(())
}
