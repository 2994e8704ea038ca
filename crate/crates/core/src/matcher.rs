//! Candidate sets, inner-product scoring, argmax matching and the matching
//! loss.
//!
//! Pixels are `(row, col)` pairs. Candidate indices are 0-based.

use crate::error::{Error, Result};
use crate::nn::softmax;
use crate::tensor::Tensor;

pub type Pixel = (usize, usize);

/// Dense descriptors stored pixel-major (`H x W x D`) so that each pixel's
/// vector is contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if height * width * dim == 0 || data.len() != height * width * dim {
            return Err(Error::shape(format!(
                "feature map {height}x{width}x{dim} cannot hold {} values",
                data.len()
            )));
        }
        Ok(FeatureMap {
            height,
            width,
            dim,
            data,
        })
    }

    /// Transposes a `D x H x W` tensor.
    pub fn from_chw(t: &Tensor<f32>) -> Result<Self> {
        let (d, h, w) = t.chw()?;
        let n = h * w;
        let src = t.data();
        let mut data = vec![0.0; d * n];
        for c in 0..d {
            for p in 0..n {
                data[p * d + c] = src[c * n + p];
            }
        }
        Self::new(h, w, d, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn at(&self, (r, c): Pixel) -> &[f32] {
        let i = (r * self.width + c) * self.dim;
        &self.data[i..i + self.dim]
    }

    /// Candidate descriptors stacked into an `N x D` row-major buffer.
    pub fn gather(&self, pixels: &[Pixel]) -> Vec<f32> {
        pixels.iter().flat_map(|&p| self.at(p).iter().copied()).collect()
    }
}

/// A source pixel and the target pixels it may match.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSet {
    pub source: Option<Pixel>,
    pub targets: Vec<Pixel>,
    /// Index of the ground-truth target, when known.
    pub gt: Option<usize>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Window bounds `[row - radius_y, row + radius_y] x [col - radius_x,
/// col + radius_x]` clipped to the target image, in row-major order.
pub fn candidate_window(
    p: Pixel,
    radius_y: usize,
    radius_x: usize,
    height: usize,
    width: usize,
) -> Result<CandidateSet> {
    if p.0 >= height || p.1 >= width {
        return Err(Error::invalid(format!("source {p:?} outside {height}x{width} target")));
    }
    let (r0, r1) = (p.0.saturating_sub(radius_y), (p.0 + radius_y).min(height - 1));
    let (c0, c1) = (p.1.saturating_sub(radius_x), (p.1 + radius_x).min(width - 1));
    let targets = (r0..=r1).flat_map(|r| (c0..=c1).map(move |c| (r, c))).collect();
    Ok(CandidateSet {
        source: Some(p),
        targets,
        gt: None,
    })
}

/// Every pixel of the target image, row-major.
pub fn candidate_global(height: usize, width: usize) -> CandidateSet {
    CandidateSet {
        source: None,
        targets: (0..height).flat_map(|r| (0..width).map(move |c| (r, c))).collect(),
        gt: None,
    }
}

/// Inner products `g_j = <p, q_j>`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector(pub Vec<f32>);

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scores one source descriptor against `N x D` stacked target descriptors.
pub fn score_candidates(source: &[f32], targets: &[f32]) -> Result<ScoreVector> {
    let d = source.len();
    if d == 0 || !targets.len().is_multiple_of(d) {
        return Err(Error::shape(format!(
            "{} target values do not split into {d}-vectors",
            targets.len()
        )));
    }
    Ok(ScoreVector(targets.chunks_exact(d).map(|q| dot(source, q)).collect()))
}

/// Highest score with ties going to the lowest index. Returns
/// `(index, score)`.
pub fn argmax(scores: &[f32]) -> Option<(usize, f32)> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((i, s)),
        }
    }
    best
}

/// Best-scoring candidate: `(index, position, score)`.
pub fn best_match(scores: &ScoreVector, candidates: &CandidateSet) -> Result<(usize, Pixel, f32)> {
    if candidates.is_empty() || scores.0.is_empty() {
        return Err(Error::invalid("best_match over an empty candidate set"));
    }
    if scores.0.len() != candidates.len() {
        return Err(Error::shape(format!(
            "{} scores for {} candidates",
            scores.0.len(),
            candidates.len()
        )));
    }
    let (i, s) = argmax(&scores.0).expect("non-empty");
    Ok((i, candidates.targets[i], s))
}

/// `-log softmax(scores)[gt]`, evaluated with max subtraction.
pub fn match_loss(scores: &ScoreVector, gt: usize) -> Result<f64> {
    if gt >= scores.0.len() {
        return Err(Error::invalid(format!(
            "ground-truth index {gt} out of range for {} candidates",
            scores.0.len()
        )));
    }
    let s: Vec<f64> = scores.0.iter().map(|&v| v as f64).collect();
    Ok(softmax::cross_entropy(&s, gt).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn interior_window_has_full_count() {
        let c = candidate_window((10, 10), 1, 1, 100, 100).unwrap();
        assert_eq!(c.len(), 9);
        assert_eq!(c.targets[4], (10, 10));
        assert_eq!(c.targets[0], (9, 9));
    }

    #[test]
    fn corner_window_is_clipped() {
        let c = candidate_window((0, 0), 1, 1, 100, 100).unwrap();
        assert_eq!(c.targets, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn large_motion_window_count() {
        // enumeration oracle: count in-bounds offsets directly
        let (h, w, p, r) = (436usize, 1024usize, (200usize, 500usize), 240isize);
        let mut expected = 0;
        for dy in -r..=r {
            for dx in -r..=r {
                let (y, x) = (p.0 as isize + dy, p.1 as isize + dx);
                if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
                    expected += 1;
                }
            }
        }
        let c = candidate_window(p, 240, 240, h, w).unwrap();
        assert_eq!(c.len(), expected);
        assert_eq!(c.len(), 436 * 481);
    }

    #[test]
    fn window_rejects_outside_source() {
        assert!(candidate_window((5, 0), 1, 1, 5, 5).is_err());
    }

    #[test]
    fn global_candidates_are_row_major() {
        let c = candidate_global(2, 3);
        assert_eq!(c.targets, vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]);
        assert_eq!(candidate_global(1, 1).len(), 1);
        assert_eq!(candidate_global(7, 5).len(), 35);
    }

    #[test]
    fn scores_are_inner_products() {
        assert_eq!(score_candidates(&[1.0, 2.0], &[3.0, 4.0]).unwrap().0, vec![11.0]);
        assert_eq!(score_candidates(&[1.0, 0.0], &[0.0, 5.0]).unwrap().0, vec![0.0]);
        assert!(score_candidates(&[1.0, 0.0], &[0.0, 5.0, 1.0]).is_err());
    }

    #[test]
    fn scores_match_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q: Vec<f32> = (0..80).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = score_candidates(&p, &q).unwrap();
        for j in 0..5 {
            let mut acc = 0.0f64;
            for d in 0..16 {
                acc += p[d] as f64 * q[j * 16 + d] as f64;
            }
            assert!((got.0[j] as f64 - acc).abs() < 1e-6);
        }
    }

    #[test]
    fn best_match_picks_max_and_breaks_ties_low() {
        let cands = candidate_global(1, 3);
        let (i, pos, s) = best_match(&ScoreVector(vec![1.0, 5.0, 2.0]), &cands).unwrap();
        assert_eq!((i, pos, s), (1, (0, 1), 5.0));
        let (i, _, _) = best_match(&ScoreVector(vec![3.0; 3]), &cands).unwrap();
        assert_eq!(i, 0);
        let empty = CandidateSet {
            source: None,
            targets: vec![],
            gt: None,
        };
        assert!(best_match(&ScoreVector(vec![]), &empty).is_err());
    }

    #[test]
    fn loss_reference_values() {
        let l = match_loss(&ScoreVector(vec![0.0; 201]), 0).unwrap();
        assert!((l - 201f64.ln()).abs() < 1e-12);
        assert!((l - 5.3033).abs() < 1e-4);
        let l = match_loss(&ScoreVector(vec![2.0, 0.0]), 0).unwrap();
        assert!((l - 0.12693).abs() < 1e-5);
        assert!(match_loss(&ScoreVector(vec![2.0, 0.0]), 2).is_err());
    }

    #[test]
    fn loss_decreases_with_margin() {
        let mut prev = f64::INFINITY;
        for m in 0..30 {
            let l = match_loss(&ScoreVector(vec![m as f32, 0.0, 0.0]), 0).unwrap();
            assert!(l < prev && l >= 0.0);
            prev = l;
        }
        assert!(prev < 1e-11);
    }
}
