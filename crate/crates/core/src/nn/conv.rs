//! Stride-1, zero-padded 2-D cross-correlation via im2col + gemm.

use crate::error::{Error, Result};
use crate::tensor::Float;

/// Shapes of one convolution: `C x H x W` input, `O x C x K x K` kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl Conv2dGeometry {
    pub fn new(input: &[usize], weights: &[usize], bias: &[usize]) -> Result<Self> {
        let (c, h, w) = match *input {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::shape(format!("conv2d input must be C x H x W, got {input:?}"))),
        };
        let (o, wc, kh, kw) = match *weights {
            [o, wc, kh, kw] => (o, wc, kh, kw),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d weights must be O x C x K x K, got {weights:?}"
                )))
            }
        };
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(format!(
                "conv2d kernel must be square and odd, got {kh}x{kw}"
            )));
        }
        if wc != c {
            return Err(Error::shape(format!(
                "conv2d weights expect {wc} input channels, input has {c}"
            )));
        }
        if bias != [o] {
            return Err(Error::shape(format!("conv2d bias must be [{o}], got {bias:?}")));
        }
        Ok(Conv2dGeometry {
            in_channels: c,
            out_channels: o,
            height: h,
            width: w,
            kernel: kh,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Unfolds `input` into a `(C*K*K) x (H*W)` column matrix with zero padding.
pub fn im2col<T: Float>(g: &Conv2dGeometry, input: &[T]) -> Vec<T> {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![T::zero(); g.patch_len() * hw];
    for c in 0..g.in_channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst_row = &mut dst[y * w..(y + 1) * w];
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for x in x_lo..x_hi {
                        dst_row[x] = src_row[(x as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Folds a column matrix back onto the input grid, summing overlaps.
pub fn col2im<T: Float>(g: &Conv2dGeometry, cols: &[T], out: &mut [T]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..g.in_channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src_row = &src[y * w..(y + 1) * w];
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for x in x_lo..x_hi {
                        dst_row[(x as isize + dx) as usize] += src_row[x];
                    }
                }
            }
        }
    }
}

/// Returns the `O x H x W` output. `cols` must come from [`im2col`], or be
/// the input itself for 1x1 kernels.
pub fn forward<T: Float>(g: &Conv2dGeometry, cols: &[T], weights: &[T], bias: &[T]) -> Vec<T> {
    let hw = g.pixels();
    let kk = g.patch_len();
    let mut out = vec![T::zero(); g.out_channels * hw];
    for (o, b) in bias.iter().enumerate() {
        out[o * hw..(o + 1) * hw].fill(*b);
    }
    T::gemm(
        g.out_channels,
        kk,
        hw,
        T::one(),
        weights,
        (kk as isize, 1),
        cols,
        (hw as isize, 1),
        T::one(),
        &mut out,
        (hw as isize, 1),
    );
    out
}

/// Accumulates weight and bias gradients, and returns the column-space
/// gradient (`None` if the input gradient is not wanted).
pub fn backward<T: Float>(
    g: &Conv2dGeometry,
    cols: &[T],
    weights: &[T],
    grad_out: &[T],
    grad_weights: &mut [T],
    grad_bias: &mut [T],
    want_input: bool,
) -> Option<Vec<T>> {
    let hw = g.pixels();
    let kk = g.patch_len();
    // dW += dY * cols^T
    T::gemm(
        g.out_channels,
        hw,
        kk,
        T::one(),
        grad_out,
        (hw as isize, 1),
        cols,
        (1, hw as isize),
        T::one(),
        grad_weights,
        (kk as isize, 1),
    );
    for (o, gb) in grad_bias.iter_mut().enumerate() {
        *gb += grad_out[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
    }
    if !want_input {
        return None;
    }
    // dcols = W^T * dY
    let mut grad_cols = vec![T::zero(); kk * hw];
    T::gemm(
        kk,
        g.out_channels,
        hw,
        T::one(),
        weights,
        (1, kk as isize),
        grad_out,
        (hw as isize, 1),
        T::zero(),
        &mut grad_cols,
        (hw as isize, 1),
    );
    Some(grad_cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Six nested loops, no im2col: the reference the gemm path must match.
    fn conv_reference(
        c: usize,
        h: usize,
        w: usize,
        o: usize,
        input: &[f64],
        weights: &[f64],
        bias: &[f64],
    ) -> Vec<f64> {
        let mut out = vec![0.0; o * h * w];
        for oc in 0..o {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = x as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += weights[((oc * c + ic) * 3 + ky) * 3 + kx]
                                    * input[(ic * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out[(oc * h + y) * w + x] = acc;
                }
            }
        }
        out
    }

    fn run<T: Float>(shape: [usize; 3], o: usize, input: &[T], weights: &[T], bias: &[T]) -> Vec<T> {
        let g = Conv2dGeometry::new(&shape, &[o, shape[0], 3, 3], &[o]).unwrap();
        forward(&g, &im2col(&g, input), weights, bias)
    }

    #[test]
    fn all_ones_kernel_counts_in_bounds_taps() {
        let out = run::<f32>([1, 3, 3], 1, &[1.0; 9], &[1.0; 9], &[0.0]);
        assert_eq!(out, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let out = run::<f32>([2, 4, 4], 3, &[0.7; 32], &[0.0; 54], &[1.5, -2.0, 0.0]);
        assert!(out[..16].iter().all(|&v| v == 1.5));
        assert!(out[16..32].iter().all(|&v| v == -2.0));
        assert!(out[32..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_nested_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let weights: Vec<f64> = (0..72).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let expected = conv_reference(2, 5, 5, 4, &input, &weights, &bias);

        let got = run([2, 5, 5], 4, &input, &weights, &bias);
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }

        let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        let got32 = run([2, 5, 5], 4, &to32(&input), &to32(&weights), &to32(&bias));
        for (a, b) in got32.iter().zip(&expected) {
            assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Conv2dGeometry::new(&[2, 4, 5], &[1, 2, 3, 3], &[1]).unwrap();
        let x: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..g.patch_len() * 20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs: f64 = im2col(&g, &x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 40];
        col2im(&g, &y, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        assert!(Conv2dGeometry::new(&[2, 4, 4], &[3, 1, 3, 3], &[3]).is_err());
        assert!(Conv2dGeometry::new(&[2, 4, 4], &[3, 2, 2, 2], &[3]).is_err());
        assert!(Conv2dGeometry::new(&[2, 4, 4], &[3, 2, 3, 3], &[2]).is_err());
        assert!(Conv2dGeometry::new(&[4, 4], &[3, 2, 3, 3], &[3]).is_err());
    }
}
