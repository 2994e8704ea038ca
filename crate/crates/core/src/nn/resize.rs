//! Bilinear resampling with pixel-center alignment.
//!
//! Output pixel `d` samples input coordinate `(d + 0.5) * in / out - 0.5`,
//! clamped to the valid range.

use crate::error::{Error, Result};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn taps<T: Float>(input: usize, output: usize) -> Vec<Tap<T>> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap {
                lo,
                hi,
                frac: T::from_f64(frac),
            }
        })
        .collect()
}

/// Precomputed interpolation taps for one `(H, W) -> (outH, outW)` resize.
#[derive(Clone, Debug)]
pub struct ResizePlan<T> {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    rows: Vec<Tap<T>>,
    cols: Vec<Tap<T>>,
}

impl<T: Float> ResizePlan<T> {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<Self> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid(format!(
                "resize target must be positive, got {out_h}x{out_w}"
            )));
        }
        if in_h == 0 || in_w == 0 {
            return Err(Error::invalid("resize input has zero extent"));
        }
        Ok(ResizePlan {
            in_h,
            in_w,
            out_h,
            out_w,
            rows: taps(in_h, out_h),
            cols: taps(in_w, out_w),
        })
    }

    pub fn is_identity(&self) -> bool {
        self.in_h == self.out_h && self.in_w == self.out_w
    }

    pub fn forward(&self, input: &[T], channels: usize) -> Vec<T> {
        if self.is_identity() {
            return input.to_vec();
        }
        let (ih, iw, oh, ow) = (self.in_h, self.in_w, self.out_h, self.out_w);
        let mut out = vec![T::zero(); channels * oh * ow];
        for c in 0..channels {
            let plane = &input[c * ih * iw..(c + 1) * ih * iw];
            let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
            for (y, ry) in self.rows.iter().enumerate() {
                let top = &plane[ry.lo * iw..(ry.lo + 1) * iw];
                let bot = &plane[ry.hi * iw..(ry.hi + 1) * iw];
                for (x, rx) in self.cols.iter().enumerate() {
                    let t = top[rx.lo] + (top[rx.hi] - top[rx.lo]) * rx.frac;
                    let b = bot[rx.lo] + (bot[rx.hi] - bot[rx.lo]) * rx.frac;
                    dst[y * ow + x] = t + (b - t) * ry.frac;
                }
            }
        }
        out
    }

    /// Scatters output gradients back onto the input grid.
    pub fn backward(&self, grad_out: &[T], channels: usize) -> Vec<T> {
        if self.is_identity() {
            return grad_out.to_vec();
        }
        let (ih, iw, oh, ow) = (self.in_h, self.in_w, self.out_h, self.out_w);
        let mut grad_in = vec![T::zero(); channels * ih * iw];
        for c in 0..channels {
            let src = &grad_out[c * oh * ow..(c + 1) * oh * ow];
            let dst = &mut grad_in[c * ih * iw..(c + 1) * ih * iw];
            for (y, ry) in self.rows.iter().enumerate() {
                let wy_hi = ry.frac;
                let wy_lo = T::one() - wy_hi;
                for (x, rx) in self.cols.iter().enumerate() {
                    let g = src[y * ow + x];
                    let wx_hi = rx.frac;
                    let wx_lo = T::one() - wx_hi;
                    dst[ry.lo * iw + rx.lo] += g * wy_lo * wx_lo;
                    dst[ry.lo * iw + rx.hi] += g * wy_lo * wx_hi;
                    dst[ry.hi * iw + rx.lo] += g * wy_hi * wx_lo;
                    dst[ry.hi * iw + rx.hi] += g * wy_hi * wx_hi;
                }
            }
        }
        grad_in
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct evaluation of the half-pixel bilinear formula for one sample.
    fn bilinear_at(img: &[f64], h: usize, w: usize, oh: usize, ow: usize, y: usize, x: usize) -> f64 {
        let sy = (((y as f64) + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let sx = (((x as f64) + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let at = |r: usize, c: usize| img[r * w + c];
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
    }

    #[test]
    fn single_pixel_broadcasts() {
        let p = ResizePlan::<f32>::new(1, 1, 3, 5).unwrap();
        assert!(p.forward(&[2.5], 1).iter().all(|&v| v == 2.5));
    }

    #[test]
    fn same_size_is_bitwise_identity() {
        let x: Vec<f32> = (0..24).map(|i| (i as f32).sin()).collect();
        let p = ResizePlan::<f32>::new(3, 4, 3, 4).unwrap();
        assert_eq!(p.forward(&x, 2), x);
    }

    #[test]
    fn upsample_2x2_to_4x4_matches_formula() {
        let img = [0.0, 1.0, 2.0, 3.0];
        let p = ResizePlan::<f64>::new(2, 2, 4, 4).unwrap();
        let out = p.forward(&img, 1);
        for y in 0..4 {
            for x in 0..4 {
                let expected = bilinear_at(&img, 2, 2, 4, 4, y, x);
                assert!((out[y * 4 + x] - expected).abs() < 1e-12);
            }
        }
        assert_eq!(out[0], 0.0);
        assert_eq!(out[5], 0.75);
        assert_eq!(out[15], 3.0);
    }

    #[test]
    fn downsample_matches_formula() {
        let img: Vec<f64> = (0..35).map(|i| (i * i % 13) as f64).collect();
        let p = ResizePlan::<f64>::new(5, 7, 3, 4).unwrap();
        let out = p.forward(&img, 1);
        for y in 0..3 {
            for x in 0..4 {
                assert!((out[y * 4 + x] - bilinear_at(&img, 5, 7, 3, 4, y, x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_adjoint() {
        let p = ResizePlan::<f64>::new(3, 5, 7, 4).unwrap();
        let x: Vec<f64> = (0..15).map(|i| (i as f64 * 0.7).cos()).collect();
        let g: Vec<f64> = (0..28).map(|i| (i as f64 * 0.3).sin()).collect();
        let lhs: f64 = p.forward(&x, 1).iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = p.backward(&g, 1).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn rejects_empty_target() {
        assert!(ResizePlan::<f32>::new(4, 4, 0, 3).is_err());
    }
}
