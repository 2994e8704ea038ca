//! Attention maps as images: one grayscale weight map per scale and a
//! colour-coded map of the dominant scale.

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::io::image::Image;
use crate::io::pnm::write_pnm;
use crate::matcher::argmax;
use crate::model::AttentionMap;

/// Colours for up to four scales, finest first.
pub const SCALE_COLORS: [[u8; 3]; 4] = [[252, 103, 105], [254, 230, 74], [90, 253, 137], [176, 74, 251]];

/// Fully saturated colours at evenly spaced hues.
pub fn hue_wheel(n: usize) -> Vec<[u8; 3]> {
    (0..n)
        .map(|i| {
            let h = 6.0 * i as f64 / n as f64;
            let x = 1.0 - ((h % 2.0) - 1.0).abs();
            let (r, g, b) = match h as usize {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            [r, g, b].map(|c: f64| (c * 255.0).round() as u8)
        })
        .collect()
}

pub fn scale_palette(n: usize) -> Vec<[u8; 3]> {
    if n <= SCALE_COLORS.len() {
        SCALE_COLORS[..n].to_vec()
    } else {
        hue_wheel(n)
    }
}

/// Per-scale weight images, each `round(weight * 255)`.
pub fn weight_images(att: &AttentionMap) -> Vec<Image> {
    let (h, w) = (att.height(), att.width());
    (0..att.num_scales())
        .map(|s| {
            let data = att
                .weights
                .channel(s)
                .iter()
                .map(|&x| (x * 255.0).round() as u8)
                .collect();
            Image::new(w, h, 1, data).expect("sized")
        })
        .collect()
}

/// Each pixel coloured by its highest-weight scale (ties to the finer).
pub fn argmax_image(att: &AttentionMap) -> Image {
    let (h, w, s) = (att.height(), att.width(), att.num_scales());
    let n = h * w;
    let palette = scale_palette(s);
    let mut data = Vec::with_capacity(3 * n);
    let mut weights = vec![0.0; s];
    for p in 0..n {
        for (k, x) in weights.iter_mut().enumerate() {
            *x = att.weights.data()[k * n + p];
        }
        let (k, _) = argmax(&weights).expect("at least one scale");
        data.extend_from_slice(&palette[k]);
    }
    Image::new(w, h, 3, data).expect("sized")
}

/// Writes `{prefix}_scale{k}.pgm` for every scale and `{prefix}_argmax.ppm`.
/// Returns the written paths.
pub fn export_attention(att: &AttentionMap, prefix: &Path) -> Result<Vec<PathBuf>> {
    let stem = prefix.as_os_str().to_string_lossy().into_owned();
    let mut paths = Vec::new();
    for (k, img) in weight_images(att).iter().enumerate() {
        let path = PathBuf::from(format!("{stem}_scale{k}.pgm"));
        write_pnm(&path, img)?;
        paths.push(path);
    }
    let path = PathBuf::from(format!("{stem}_argmax.ppm"));
    write_pnm(&path, &argmax_image(att))?;
    paths.push(path);
    Ok(paths)
}
