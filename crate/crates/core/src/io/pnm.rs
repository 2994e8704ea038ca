//! Binary PGM (`P5`) and PPM (`P6`) with `maxval` 255.

use std::path::Path;

use super::image::Image;
use crate::error::{Error, Result};

pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::UnsupportedImage(format!("malformed {what} in header")))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        Some(b"P2") | Some(b"P3") => {
            return Err(Error::UnsupportedImage(
                "ASCII PNM (P2/P3) is not supported; convert to binary P5/P6".into(),
            ))
        }
        _ => return Err(Error::UnsupportedImage("not a binary PGM/PPM file".into())),
    };
    let mut hdr = Header { bytes, pos: 2 };
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    let maxval = hdr.number("maxval")?;
    if maxval != 255 {
        return Err(Error::UnsupportedImage(format!(
            "maxval {maxval}, only 255 is supported"
        )));
    }
    if !bytes.get(hdr.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::UnsupportedImage("missing separator after maxval".into()));
    }
    let data = &bytes[hdr.pos + 1..];
    let expected = width.checked_mul(height).and_then(|n| n.checked_mul(channels));
    if expected != Some(data.len()) {
        return Err(Error::UnsupportedImage(format!(
            "pixel data of {} bytes for a {width}x{height}x{channels} image",
            data.len()
        )));
    }
    Image::new(width, height, channels, data.to_vec())
}

pub fn write_pnm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    super::write_bytes(path.as_ref(), &encode_pnm(img))
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<Image> {
    decode_pnm(&super::read_bytes(path.as_ref())?)
}
