//! Dense flow: windowed exhaustive matching, forward-backward filtering,
//! hole filling and end-point error.
//!
//! Flow vectors are stored as `u = d(col)`, `v = d(row)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matcher::{dot, FeatureMap};

/// Per-pixel displacement with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, u: Vec<f32>, v: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        let n = width * height;
        if n == 0 {
            return Err(Error::invalid(format!("flow field {width}x{height} is empty")));
        }
        if u.len() != n || v.len() != n || valid.len() != n {
            return Err(Error::shape(format!("flow buffers do not match {width}x{height}")));
        }
        if (0..n).any(|i| valid[i] && !(u[i].is_finite() && v[i].is_finite())) {
            return Err(Error::NonFinite("valid flow vector".into()));
        }
        Ok(FlowField {
            width,
            height,
            u,
            v,
            valid,
        })
    }

    pub fn constant(width: usize, height: usize, u: f32, v: f32) -> Self {
        let n = width * height;
        FlowField {
            width,
            height,
            u: vec![u; n],
            v: vec![v; n],
            valid: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// `(u, v)` at a pixel.
    pub fn at(&self, row: usize, col: usize) -> (f32, f32) {
        let i = self.index(row, col);
        (self.u[i], self.v[i])
    }

    fn same_dims(&self, other: &FlowField) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::shape(format!(
                "flow fields {}x{} and {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// For every source pixel, the best-scoring target pixel inside the clipped
/// `(2 radius_y + 1) x (2 radius_x + 1)` window. Rows are matched in
/// parallel; each pixel is scanned in row-major window order, so ties always
/// resolve to the first candidate.
pub fn dense_match(source: &FeatureMap, target: &FeatureMap, radius_y: usize, radius_x: usize) -> Result<FlowField> {
    let (h, w) = (source.height(), source.width());
    if (target.height(), target.width(), target.dim()) != (h, w, source.dim()) {
        return Err(Error::shape(format!(
            "source {}x{}x{} vs target {}x{}x{}",
            h,
            w,
            source.dim(),
            target.height(),
            target.width(),
            target.dim()
        )));
    }
    let rows: Vec<Vec<(f32, f32)>> = (0..h)
        .into_par_iter()
        .map(|r| {
            (0..w)
                .map(|c| {
                    let p = source.at((r, c));
                    let mut best = (f32::NEG_INFINITY, r, c);
                    let mut first = true;
                    for tr in r.saturating_sub(radius_y)..=(r + radius_y).min(h - 1) {
                        for tc in c.saturating_sub(radius_x)..=(c + radius_x).min(w - 1) {
                            let s = dot(p, target.at((tr, tc)));
                            if first || s > best.0 {
                                best = (s, tr, tc);
                                first = false;
                            }
                        }
                    }
                    (best.2 as f32 - c as f32, best.1 as f32 - r as f32)
                })
                .collect()
        })
        .collect();
    let (u, v) = rows.into_iter().flatten().unzip();
    FlowField::new(w, h, u, v, vec![true; w * h])
}

/// Keeps pixel `p` iff `|u_b(p + u_f(p)) + u_f(p)| <= threshold`, looking up
/// the backward flow at the nearest pixel. Lookups outside the image, or on
/// invalid backward pixels, discard `p`.
pub fn fb_consistency_filter(forward: &FlowField, backward: &FlowField, threshold: f32) -> Result<FlowField> {
    forward.same_dims(backward)?;
    let mut out = forward.clone();
    let (h, w) = (forward.height as f32, forward.width as f32);
    for r in 0..forward.height {
        for c in 0..forward.width {
            let i = forward.index(r, c);
            if !forward.valid[i] {
                continue;
            }
            let qr = (r as f32 + forward.v[i]).round();
            let qc = (c as f32 + forward.u[i]).round();
            let keep = if qr < 0.0 || qc < 0.0 || qr >= h || qc >= w {
                false
            } else {
                let j = backward.index(qr as usize, qc as usize);
                backward.valid[j] && {
                    let du = backward.u[j] + forward.u[i];
                    let dv = backward.v[j] + forward.v[i];
                    du.hypot(dv) <= threshold
                }
            };
            out.valid[i] = keep;
        }
    }
    Ok(out)
}

/// Gives every invalid pixel the flow of its nearest valid pixel (Euclidean
/// distance, ties to the valid pixel that comes first in row-major order).
pub fn fill_flow(masked: &FlowField) -> Result<FlowField> {
    if masked.valid_count() == 0 {
        return Err(Error::invalid("fill_flow: no valid pixels"));
    }
    let (h, w) = (masked.height as isize, masked.width as isize);
    let nearest = |r: isize, c: isize| -> usize {
        let mut best: Option<(isize, usize)> = None;
        let consider = |best: &mut Option<(isize, usize)>, y: isize, x: isize| {
            if y < 0 || x < 0 || y >= h || x >= w {
                return;
            }
            let j = (y * w + x) as usize;
            if !masked.valid[j] {
                return;
            }
            let d2 = (y - r) * (y - r) + (x - c) * (x - c);
            if best.is_none_or(|b| (d2, j) < b) {
                *best = Some((d2, j));
            }
        };
        for k in 1..=h.max(w) {
            if best.is_some_and(|(d2, _)| k * k > d2) {
                break;
            }
            for x in c - k..=c + k {
                consider(&mut best, r - k, x);
                consider(&mut best, r + k, x);
            }
            for y in r - k + 1..r + k {
                consider(&mut best, y, c - k);
                consider(&mut best, y, c + k);
            }
        }
        best.expect("at least one valid pixel").1
    };
    let sources: Vec<usize> = (0..masked.height)
        .into_par_iter()
        .flat_map_iter(|r| {
            (0..masked.width).map(move |c| {
                let i = r * masked.width + c;
                if masked.valid[i] {
                    i
                } else {
                    nearest(r as isize, c as isize)
                }
            })
        })
        .collect();
    Ok(FlowField {
        width: masked.width,
        height: masked.height,
        u: sources.iter().map(|&j| masked.u[j]).collect(),
        v: sources.iter().map(|&j| masked.v[j]).collect(),
        valid: vec![true; masked.len()],
    })
}

/// Mean end-point error over pixels where `mask` is set.
pub fn epe(pred: &FlowField, gt: &FlowField, mask: &[bool]) -> Result<f64> {
    pred.same_dims(gt)?;
    if mask.len() != pred.len() {
        return Err(Error::shape("epe mask size"));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for i in (0..mask.len()).filter(|&i| mask[i]) {
        let du = (pred.u[i] - gt.u[i]) as f64;
        let dv = (pred.v[i] - gt.v[i]) as f64;
        total += du.hypot(dv);
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("epe over an empty mask"));
    }
    Ok(total / count as f64)
}

/// Matched features in both directions, filtered and filled.
pub struct FlowEstimate {
    pub forward: FlowField,
    pub backward: FlowField,
    pub filtered: FlowField,
    pub filled: FlowField,
}

pub fn estimate_flow(
    source: &FeatureMap,
    target: &FeatureMap,
    radius_y: usize,
    radius_x: usize,
    threshold: f32,
) -> Result<FlowEstimate> {
    let forward = dense_match(source, target, radius_y, radius_x)?;
    let backward = dense_match(target, source, radius_y, radius_x)?;
    let filtered = fb_consistency_filter(&forward, &backward, threshold)?;
    let filled = fill_flow(&filtered)?;
    Ok(FlowEstimate {
        forward,
        backward,
        filtered,
        filled,
    })
}
