//! File formats and the synthetic correspondence generator.

pub mod attention;
pub mod checkpoint;
pub mod flo;
pub mod image;
pub mod pnm;
pub mod synth;

pub use attention::export_attention;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use flo::{read_flo, write_flo};
pub use image::Image;
pub use pnm::{read_pnm, write_pnm};
pub use synth::{synth_pair, SynthConfig, SyntheticPair};

use std::path::Path;

use crate::error::{Error, Result};

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
