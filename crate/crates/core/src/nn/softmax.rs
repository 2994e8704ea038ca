//! Softmax across the channel axis of an `S x H x W` map, per pixel.

use crate::tensor::Float;

pub fn channel_softmax<T: Float>(input: &[T], channels: usize) -> Vec<T> {
    let n = input.len() / channels;
    let mut out = vec![T::zero(); input.len()];
    for p in 0..n {
        let max = (0..channels).map(|c| input[c * n + p]).fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for c in 0..channels {
            let e = (input[c * n + p] - max).exp();
            out[c * n + p] = e;
            total += e;
        }
        for c in 0..channels {
            out[c * n + p] = out[c * n + p] / total;
        }
    }
    out
}

/// Gradient through the softmax given its output `probs`.
pub fn channel_softmax_backward<T: Float>(probs: &[T], grad_out: &[T], channels: usize) -> Vec<T> {
    let n = probs.len() / channels;
    let mut grad_in = vec![T::zero(); probs.len()];
    for p in 0..n {
        let dot = (0..channels).map(|c| probs[c * n + p] * grad_out[c * n + p]).sum::<T>();
        for c in 0..channels {
            let i = c * n + p;
            grad_in[i] = probs[i] * (grad_out[i] - dot);
        }
    }
    grad_in
}

/// `-log softmax(scores)[target]` and the softmax probabilities.
pub fn cross_entropy<T: Float>(scores: &[T], target: usize) -> (T, Vec<T>) {
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = scores.iter().map(|&s| (s - max).exp()).sum();
    let log_z = max + total.ln();
    let probs = scores.iter().map(|&s| (s - log_z).exp()).collect();
    (log_z - scores[target], probs)
}
