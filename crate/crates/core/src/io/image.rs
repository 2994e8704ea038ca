//! 8-bit images and their conversion to network input tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit pixels, one or three channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

pub const GRAY_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !(channels == 1 || channels == 3) {
            return Err(Error::UnsupportedImage(format!("{channels} channels")));
        }
        if width == 0 || height == 0 || data.len() != width * height * channels {
            return Err(Error::shape(format!(
                "{width}x{height}x{channels} image with {} bytes",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    /// `C x H x W` tensor in `[0, 1]`. With `gray`, colour images are
    /// collapsed to one luma channel.
    pub fn to_tensor(&self, gray: bool) -> Tensor<f32> {
        let n = self.width * self.height;
        if gray && self.channels == 3 {
            let data = self
                .data
                .chunks_exact(3)
                .map(|px| px.iter().zip(GRAY_WEIGHTS).map(|(&v, w)| v as f32 * w).sum::<f32>() / 255.0)
                .collect();
            return Tensor::new([1, self.height, self.width], data).expect("sized");
        }
        let c = self.channels;
        let mut data = vec![0.0; c * n];
        for p in 0..n {
            for ch in 0..c {
                data[ch * n + p] = self.data[p * c + ch] as f32 / 255.0;
            }
        }
        Tensor::new([c, self.height, self.width], data).expect("sized")
    }

    /// Quantizes a `[0, 1]` tensor with one or three channels.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (c, h, w) = t.chw()?;
        let n = h * w;
        let mut data = vec![0u8; c * n];
        for ch in 0..c {
            for p in 0..n {
                data[p * c + ch] = quantize(t.data()[ch * n + p]);
            }
        }
        Image::new(w, h, c, data)
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-channel standardization to zero mean and unit variance; flat
/// channels are only centred.
pub fn normalize(t: &Tensor<f32>) -> Tensor<f32> {
    let c = t.shape()[0];
    let n = t.len() / c;
    let mut out = t.clone();
    for ch in 0..c {
        let x = &mut out.data_mut()[ch * n..(ch + 1) * n];
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
        for v in x.iter_mut() {
            *v = ((*v as f64 - mean) * scale) as f32;
        }
    }
    out
}
