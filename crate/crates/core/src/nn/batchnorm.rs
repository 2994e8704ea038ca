//! Per-channel batch normalization over the spatial extent of one feature map.

use crate::error::{Error, Result};
use crate::tensor::Float;

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

/// Running statistics of one batchnorm layer. The trainable scale and shift
/// live with the other model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Float> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::from_f64(DEFAULT_BN_EPS),
            momentum: T::from_f64(DEFAULT_BN_MOMENTUM),
        }
    }

    pub fn with_eps(mut self, eps: T) -> Result<Self> {
        if !(eps > T::zero()) {
            return Err(Error::invalid("batchnorm eps must be positive"));
        }
        self.eps = eps;
        Ok(self)
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Exponential moving update with one batch's statistics.
    pub fn absorb(&mut self, mean: &[T], var: &[T]) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(var) {
            *r = ((T::one() - m) * *r + m * b).max(T::zero());
        }
    }

    pub fn cast<U: Float>(&self) -> BatchNormState<U> {
        let c = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect();
        BatchNormState {
            running_mean: c(&self.running_mean),
            running_var: c(&self.running_var),
            eps: U::from_f64(self.eps.as_f64()),
            momentum: U::from_f64(self.momentum.as_f64()),
        }
    }
}

/// Output of a train-mode forward pass, with what backward needs.
pub struct TrainForward<T> {
    pub output: Vec<T>,
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Normalizes each channel with its own mean and population variance.
pub fn forward_train<T: Float>(input: &[T], channels: usize, gamma: &[T], beta: &[T], eps: T) -> TrainForward<T> {
    let n = input.len() / channels;
    let nf = T::from_f64(n as f64);
    let mut output = vec![T::zero(); input.len()];
    let mut normalized = vec![T::zero(); input.len()];
    let mut inv_std = Vec::with_capacity(channels);
    let mut means = Vec::with_capacity(channels);
    let mut vars = Vec::with_capacity(channels);
    for c in 0..channels {
        let x = &input[c * n..(c + 1) * n];
        let mean = x.iter().copied().sum::<T>() / nf;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let is = T::one() / (var + eps).sqrt();
        let xh = &mut normalized[c * n..(c + 1) * n];
        let y = &mut output[c * n..(c + 1) * n];
        for i in 0..n {
            xh[i] = (x[i] - mean) * is;
            y[i] = gamma[c] * xh[i] + beta[c];
        }
        inv_std.push(is);
        means.push(mean);
        vars.push(var);
    }
    TrainForward {
        output,
        normalized,
        inv_std,
        mean: means,
        var: vars,
    }
}

/// Backward through [`forward_train`]; accumulates into the gamma/beta grads.
pub fn backward_train<T: Float>(
    grad_out: &[T],
    normalized: &[T],
    inv_std: &[T],
    gamma: &[T],
    grad_gamma: &mut [T],
    grad_beta: &mut [T],
) -> Vec<T> {
    let channels = inv_std.len();
    let n = grad_out.len() / channels;
    let nf = T::from_f64(n as f64);
    let mut grad_in = vec![T::zero(); grad_out.len()];
    for c in 0..channels {
        let dy = &grad_out[c * n..(c + 1) * n];
        let xh = &normalized[c * n..(c + 1) * n];
        let sum_dy = dy.iter().copied().sum::<T>();
        let sum_dy_xh = dy.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
        grad_gamma[c] += sum_dy_xh;
        grad_beta[c] += sum_dy;
        let k = gamma[c] * inv_std[c] / nf;
        let dx = &mut grad_in[c * n..(c + 1) * n];
        for i in 0..n {
            dx[i] = k * (nf * dy[i] - sum_dy - xh[i] * sum_dy_xh);
        }
    }
    grad_in
}

/// Inference-mode normalization from running statistics. Returns the output
/// and the normalized input.
pub fn forward_infer<T: Float>(input: &[T], state: &BatchNormState<T>, gamma: &[T], beta: &[T]) -> (Vec<T>, Vec<T>) {
    let channels = state.channels();
    let n = input.len() / channels;
    let mut output = vec![T::zero(); input.len()];
    let mut normalized = vec![T::zero(); input.len()];
    for c in 0..channels {
        let is = T::one() / (state.running_var[c] + state.eps).sqrt();
        let mean = state.running_mean[c];
        for i in c * n..(c + 1) * n {
            normalized[i] = (input[i] - mean) * is;
            output[i] = gamma[c] * normalized[i] + beta[c];
        }
    }
    (output, normalized)
}

pub fn backward_infer<T: Float>(
    grad_out: &[T],
    normalized: &[T],
    state: &BatchNormState<T>,
    gamma: &[T],
    grad_gamma: &mut [T],
    grad_beta: &mut [T],
) -> Vec<T> {
    let channels = state.channels();
    let n = grad_out.len() / channels;
    let mut grad_in = vec![T::zero(); grad_out.len()];
    for c in 0..channels {
        let is = T::one() / (state.running_var[c] + state.eps).sqrt();
        for i in c * n..(c + 1) * n {
            grad_gamma[c] += grad_out[i] * normalized[i];
            grad_beta[c] += grad_out[i];
            grad_in[i] = gamma[c] * is * grad_out[i];
        }
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_hand_arithmetic() {
        let f = forward_train(&[1.0f64, 2.0, 3.0], 1, &[1.0], &[0.0], 0.0);
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in f.output.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(f.mean, vec![2.0]);
        assert!((f.var[0] - 2.0 / 3.0).abs() < 1e-15);

        // the default eps shifts the result only in the sixth digit
        let f = forward_train(&[1.0f32, 2.0, 3.0], 1, &[1.0], &[0.0], DEFAULT_BN_EPS as f32);
        assert!((f.output[0] + 1.22474).abs() < 1e-5);
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let f = forward_train(&[1.0f32, -4.0, 9.0, 0.5], 1, &[0.0], &[5.0], 1e-5);
        assert!(f.output.iter().all(|&v| v == 5.0));
    }

    #[test]
    fn infer_with_unit_stats_is_identity() {
        let mut state = BatchNormState::<f64>::new(2);
        state.eps = 0.0;
        let x = [0.3, -1.0, 2.5, 7.0];
        let (y, _) = forward_infer(&x, &state, &[1.0, 1.0], &[0.0, 0.0]);
        assert_eq!(y, x);
    }

    #[test]
    fn train_output_is_standardized() {
        let x: Vec<f64> = (0..50).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0).collect();
        let f = forward_train(&x, 2, &[1.0, 1.0], &[0.0, 0.0], 1e-5);
        for c in 0..2 {
            let y = &f.output[c * 25..(c + 1) * 25];
            let mean = y.iter().sum::<f64>() / 25.0;
            let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 25.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn absorb_moves_running_stats() {
        let mut s = BatchNormState::<f64>::new(1);
        s.absorb(&[2.0], &[3.0]);
        assert!((s.running_mean[0] - 0.2).abs() < 1e-12);
        assert!((s.running_var[0] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn eps_must_be_positive() {
        assert!(BatchNormState::<f32>::new(1).with_eps(0.0).is_err());
    }
}
