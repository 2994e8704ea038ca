//! Synthetic image pairs with exact ground-truth flow.
//!
//! The scene is a textured background plus `regions` textured rectangles
//! stacked on top of it. Every layer moves by its own integer displacement
//! between the two frames, so the ground truth is piecewise constant.
//! Source pixels whose match is covered by another layer in the target, or
//! falls outside the frame, are marked invalid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::io::image::quantize;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// 1 or 3.
    pub channels: usize,
    /// Search radius the pair is meant for; no displacement component may
    /// exceed it.
    pub radius: usize,
    /// Bound on each background displacement component when drawn at random.
    pub max_flow: usize,
    /// Fixed background displacement `(u, v)`; drawn at random when `None`.
    pub flow: Option<(i32, i32)>,
    /// Number of independently moving rectangles.
    pub regions: usize,
    /// Largest brightness offset added to the target, drawn from
    /// `[-brightness, brightness]`.
    pub brightness: f32,
    /// Standard deviation of Gaussian noise added to the target.
    pub noise_std: f32,
    /// Minimum standard deviation of every 8x8 block of a texture.
    pub contrast_floor: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 48,
            height: 48,
            channels: 1,
            radius: 8,
            max_flow: 4,
            flow: None,
            regions: 2,
            brightness: 0.0,
            noise_std: 0.0,
            contrast_floor: 0.03,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::invalid(format!(
                "synthetic images must be at least 16x16, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.channels == 1 || self.channels == 3) {
            return Err(Error::invalid(format!("{} channels", self.channels)));
        }
        let r = self.radius as i64;
        if self.max_flow as i64 > r {
            return Err(Error::invalid(format!(
                "max flow {} exceeds search radius {r}",
                self.max_flow
            )));
        }
        if let Some((u, v)) = self.flow {
            if (u as i64).abs() > r || (v as i64).abs() > r {
                return Err(Error::invalid(format!("flow ({u}, {v}) exceeds search radius {r}")));
            }
        }
        if !(self.brightness >= 0.0 && self.noise_std >= 0.0 && self.contrast_floor >= 0.0) {
            return Err(Error::invalid(
                "brightness, noise and contrast floor must be non-negative",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticPair {
    /// `C x H x W` in `[0, 1]`, multiples of 1/255.
    pub source: Tensor<f32>,
    pub target: Tensor<f32>,
    pub flow: FlowField,
    pub seed: u64,
    pub config: SynthConfig,
}

/// Separable box blur with edge clamping.
fn box_blur(data: &[f32], h: usize, w: usize, radius: usize) -> Vec<f32> {
    let r = radius as isize;
    let norm = 1.0 / (2 * radius + 1) as f32;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for d in -r..=r {
                let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                acc += data[y * w + xx];
            }
            tmp[y * w + x] = acc * norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for d in -r..=r {
                let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                acc += tmp[yy * w + x];
            }
            out[y * w + x] = acc * norm;
        }
    }
    out
}

fn min_block_std(data: &[f32], h: usize, w: usize) -> f32 {
    let b = 8.min(h).min(w);
    let mut worst = f32::INFINITY;
    for by in (0..=h - b).step_by(b) {
        for bx in (0..=w - b).step_by(b) {
            let vals = (by..by + b).flat_map(|y| (bx..bx + b).map(move |x| data[y * w + x]));
            let n = (b * b) as f32;
            let (s, s2) = vals.fold((0.0f32, 0.0f32), |(s, s2), v| (s + v, s2 + v * v));
            let var = (s2 / n - (s / n).powi(2)).max(0.0);
            worst = worst.min(var.sqrt());
        }
    }
    worst
}

/// Two octaves of smoothed white noise, stretched to `[0.05, 0.95]` and
/// quantized to 8 bits. Redrawn until every 8x8 block clears `floor`.
fn texture(rng: &mut ChaCha8Rng, h: usize, w: usize, floor: f32) -> Result<Vec<f32>> {
    for _ in 0..32 {
        let fine: Vec<f32> = (0..h * w).map(|_| rng.random::<f32>()).collect();
        let coarse: Vec<f32> = (0..h * w).map(|_| rng.random::<f32>()).collect();
        let fine = box_blur(&fine, h, w, 1);
        let coarse = box_blur(&box_blur(&coarse, h, w, 2), h, w, 2);
        let mix: Vec<f32> = fine.iter().zip(&coarse).map(|(a, b)| 0.5 * a + b).collect();
        let lo = mix.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = mix.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if hi - lo < 1e-6 {
            continue;
        }
        let t: Vec<f32> = mix
            .iter()
            .map(|v| quantize(0.05 + 0.9 * (v - lo) / (hi - lo)) as f32 / 255.0)
            .collect();
        if min_block_std(&t, h, w) >= floor {
            return Ok(t);
        }
    }
    Err(Error::invalid(format!(
        "could not draw a texture with contrast floor {floor}"
    )))
}

struct Layer {
    /// Top-left corner in the source frame (may be negative for the
    /// background, which extends past the frame).
    top: isize,
    left: isize,
    height: usize,
    width: usize,
    flow: (i32, i32),
    /// Channel-major texture.
    tex: Vec<Vec<f32>>,
}

impl Layer {
    /// Texture value when the layer covers frame pixel `(r, c)` after moving
    /// by `shift` layer displacements (0 for the source, 1 for the target).
    fn sample(&self, r: isize, c: isize, shift: isize) -> Option<usize> {
        let y = r - self.top - shift * self.flow.1 as isize;
        let x = c - self.left - shift * self.flow.0 as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some(y as usize * self.width + x as usize)
        }
    }
}

fn draw_flow(rng: &mut ChaCha8Rng, bound: usize) -> (i32, i32) {
    let b = bound as i32;
    (rng.random_range(-b..=b), rng.random_range(-b..=b))
}

/// Deterministic pair for `(config, seed)`.
pub fn synth_pair(config: &SynthConfig, seed: u64) -> Result<SyntheticPair> {
    config.validate()?;
    let (h, w, ch) = (config.height, config.width, config.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg_flow = config.flow.unwrap_or_else(|| draw_flow(&mut rng, config.max_flow));
    let m = config.radius;
    let mut layers = vec![Layer {
        top: -(m as isize),
        left: -(m as isize),
        height: h + 2 * m,
        width: w + 2 * m,
        flow: bg_flow,
        tex: (0..ch)
            .map(|_| texture(&mut rng, h + 2 * m, w + 2 * m, config.contrast_floor))
            .collect::<Result<_>>()?,
    }];
    for _ in 0..config.regions {
        let rh = rng.random_range(h / 6..=h / 3).max(8);
        let rw = rng.random_range(w / 6..=w / 3).max(8);
        let top = rng.random_range(0..=(h - rh)) as isize;
        let left = rng.random_range(0..=(w - rw)) as isize;
        let flow = draw_flow(&mut rng, config.max_flow);
        let tex = (0..ch)
            .map(|_| texture(&mut rng, rh, rw, config.contrast_floor))
            .collect::<Result<_>>()?;
        layers.push(Layer {
            top,
            left,
            height: rh,
            width: rw,
            flow,
            tex,
        });
    }

    // topmost layer covering each frame pixel, and its texel
    let owner = |r: isize, c: isize, shift: isize| -> (usize, usize) {
        layers
            .iter()
            .enumerate()
            .rev()
            .find_map(|(i, l)| l.sample(r, c, shift).map(|t| (i, t)))
            .expect("background covers the frame")
    };
    let n = h * w;
    let mut source = vec![0.0f32; ch * n];
    let mut target = vec![0.0f32; ch * n];
    let mut target_owner = vec![0usize; n];
    let mut u = vec![0.0f32; n];
    let mut v = vec![0.0f32; n];
    let mut src_owner = vec![0usize; n];
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let (i, t) = owner(r as isize, c as isize, 0);
            src_owner[p] = i;
            (u[p], v[p]) = (layers[i].flow.0 as f32, layers[i].flow.1 as f32);
            let (j, tt) = owner(r as isize, c as isize, 1);
            target_owner[p] = j;
            for k in 0..ch {
                source[k * n + p] = layers[i].tex[k][t];
                target[k * n + p] = layers[j].tex[k][tt];
            }
        }
    }
    let valid: Vec<bool> = (0..n)
        .map(|p| {
            let (r, c) = ((p / w) as i64, (p % w) as i64);
            let (tr, tc) = (r + v[p] as i64, c + u[p] as i64);
            tr >= 0
                && tc >= 0
                && tr < h as i64
                && tc < w as i64
                && target_owner[(tr as usize) * w + tc as usize] == src_owner[p]
        })
        .collect();

    if config.brightness > 0.0 || config.noise_std > 0.0 {
        let offset = if config.brightness > 0.0 {
            rng.random_range(-config.brightness..=config.brightness)
        } else {
            0.0
        };
        let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
        for x in target.iter_mut() {
            let jitter = if config.noise_std > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            *x = quantize(*x + offset + jitter) as f32 / 255.0;
        }
    }

    Ok(SyntheticPair {
        source: Tensor::new([ch, h, w], source)?,
        target: Tensor::new([ch, h, w], target)?,
        flow: FlowField::new(w, h, u, v, valid)?,
        seed,
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed(u: i32, v: i32) -> SynthConfig {
        SynthConfig {
            flow: Some((u, v)),
            regions: 0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_flow_target_equals_source() {
        let p = synth_pair(&fixed(0, 0), 1).unwrap();
        assert_eq!(p.source, p.target);
        assert_eq!(p.flow.valid_count(), 48 * 48);
    }

    #[test]
    fn constant_shift_copies_source() {
        let p = synth_pair(&fixed(3, 0), 2).unwrap();
        let (s, t) = (p.source.data(), p.target.data());
        for r in 0..48 {
            for c in 0..45 {
                assert_eq!(t[r * 48 + c + 3], s[r * 48 + c]);
            }
        }
        assert!(p.flow.u.iter().all(|&u| u == 3.0));
        assert!(p.flow.v.iter().all(|&v| v == 0.0));
        assert_eq!(p.flow.valid_count(), 48 * 45);
    }

    #[test]
    fn warping_back_reproduces_source_on_valid_pixels() {
        for seed in 0..10 {
            let cfg = SynthConfig {
                regions: 3,
                channels: if seed % 2 == 0 { 1 } else { 3 },
                ..SynthConfig::default()
            };
            let p = synth_pair(&cfg, seed).unwrap();
            let (c, h, w) = p.source.chw().unwrap();
            let n = h * w;
            let mut checked = 0;
            for r in 0..h {
                for col in 0..w {
                    let i = p.flow.index(r, col);
                    if !p.flow.valid[i] {
                        continue;
                    }
                    let (u, v) = p.flow.at(r, col);
                    let j = (r as i64 + v as i64) as usize * w + (col as i64 + u as i64) as usize;
                    for k in 0..c {
                        assert_eq!(p.target.data()[k * n + j], p.source.data()[k * n + i]);
                    }
                    checked += 1;
                }
            }
            assert!(checked > n / 2, "seed {seed}: {checked} valid");
            let flows: std::collections::BTreeSet<(i64, i64)> = p
                .flow
                .u
                .iter()
                .zip(&p.flow.v)
                .map(|(&u, &v)| (u as i64, v as i64))
                .collect();
            assert!(flows.len() <= 4);
        }
    }

    #[test]
    fn same_seed_same_pair() {
        let cfg = SynthConfig {
            noise_std: 0.02,
            brightness: 0.1,
            ..SynthConfig::default()
        };
        let a = synth_pair(&cfg, 11).unwrap();
        let b = synth_pair(&cfg, 11).unwrap();
        assert_eq!(a.source, b.source);
        assert_eq!(a.target, b.target);
        assert_eq!(a.flow, b.flow);
        let c = synth_pair(&cfg, 12).unwrap();
        assert_ne!(a.source, c.source);
    }

    #[test]
    fn pixels_are_eight_bit_levels() {
        let p = synth_pair(
            &SynthConfig {
                noise_std: 0.05,
                ..SynthConfig::default()
            },
            4,
        )
        .unwrap();
        for &x in p.source.data().iter().chain(p.target.data()) {
            let q = x * 255.0;
            assert!((q - q.round()).abs() < 1e-4 && (0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn textures_clear_the_contrast_floor() {
        let p = synth_pair(&fixed(0, 0), 8).unwrap();
        assert!(min_block_std(p.source.data(), 48, 48) >= 0.03);
    }

    #[test]
    fn invalid_configs() {
        assert!(synth_pair(
            &SynthConfig {
                width: 15,
                ..SynthConfig::default()
            },
            0
        )
        .is_err());
        assert!(synth_pair(&fixed(9, 0), 0).is_err());
        assert!(synth_pair(
            &SynthConfig {
                max_flow: 9,
                ..SynthConfig::default()
            },
            0
        )
        .is_err());
        assert!(synth_pair(
            &SynthConfig {
                channels: 2,
                ..SynthConfig::default()
            },
            0
        )
        .is_err());
    }
}
