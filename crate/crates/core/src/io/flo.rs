//! Middlebury `.flo` files: little-endian `202021.25`, `i32` width, `i32`
//! height, then row-major interleaved `f32` `(u, v)`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::FlowField;

pub const FLO_MAGIC: f32 = 202021.25;
/// Stored in place of both components of an invalid pixel.
pub const INVALID_FLOW: f32 = 1e10;
/// Components at or above this magnitude read back as invalid.
pub const INVALID_THRESHOLD: f32 = 1e9;

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * flow.len());
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for i in 0..flow.len() {
        let (u, v) = if flow.valid[i] {
            (flow.u[i], flow.v[i])
        } else {
            (INVALID_FLOW, INVALID_FLOW)
        };
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    let word = |i: usize| -> Option<[u8; 4]> { bytes.get(i..i + 4)?.try_into().ok() };
    let magic = word(0).map(f32::from_le_bytes);
    if magic != Some(FLO_MAGIC) {
        return Err(Error::InvalidFlow(format!("bad magic {magic:?}")));
    }
    let (w, h) = match (word(4), word(8)) {
        (Some(w), Some(h)) => (i32::from_le_bytes(w), i32::from_le_bytes(h)),
        _ => return Err(Error::InvalidFlow("truncated header".into())),
    };
    if w <= 0 || h <= 0 {
        return Err(Error::InvalidFlow(format!("non-positive dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let n = w * h;
    let payload = &bytes[12..];
    if payload.len() / 8 != n || !payload.len().is_multiple_of(8) {
        return Err(Error::InvalidFlow(format!(
            "payload of {} bytes, expected 8 per pixel for {w}x{h}",
            payload.len()
        )));
    }
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for px in payload.chunks_exact(8) {
        let a = f32::from_le_bytes(px[..4].try_into().expect("4 bytes"));
        let b = f32::from_le_bytes(px[4..].try_into().expect("4 bytes"));
        valid.push(a.abs() < INVALID_THRESHOLD && b.abs() < INVALID_THRESHOLD);
        u.push(a);
        v.push(b);
    }
    FlowField::new(w, h, u, v, valid).map_err(|e| Error::InvalidFlow(e.to_string()))
}

pub fn write_flo(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    super::write_bytes(path.as_ref(), &encode_flo(flow))
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    decode_flo(&super::read_bytes(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_layout() {
        let f = FlowField::constant(1, 1, 1.5, -2.0);
        let bytes = encode_flo(&f);
        assert_eq!(bytes.len(), 12 + 8);
        assert_eq!(&bytes[..4], &202021.25f32.to_le_bytes());
        assert_eq!(&bytes[4..8], &1i32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1.5f32.to_le_bytes());
        assert_eq!(&bytes[16..20], &(-2.0f32).to_le_bytes());
        assert_eq!(decode_flo(&bytes).unwrap(), f);
    }

    #[test]
    fn invalid_pixels_use_sentinel() {
        let mut f = FlowField::constant(2, 1, 0.5, 0.5);
        f.valid[1] = false;
        f.u[1] = INVALID_FLOW;
        f.v[1] = INVALID_FLOW;
        let back = decode_flo(&encode_flo(&f)).unwrap();
        assert_eq!(back.valid, vec![true, false]);
        assert_eq!(back, f);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = encode_flo(&FlowField::constant(2, 2, 0.0, 0.0));
        let err = decode_flo(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::InvalidFlow(_)));
        bytes[..4].copy_from_slice(&0f32.to_le_bytes());
        let err = decode_flo(&bytes).unwrap_err();
        assert!(err.to_string().starts_with("invalid flow file"), "{err}");
    }

    #[test]
    fn rejects_non_positive_dims() {
        let mut bytes = encode_flo(&FlowField::constant(1, 1, 0.0, 0.0));
        bytes[4..8].copy_from_slice(&0i32.to_le_bytes());
        assert!(decode_flo(&bytes).is_err());
    }
}
