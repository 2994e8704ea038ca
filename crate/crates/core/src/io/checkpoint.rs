//! Binary model checkpoints.
//!
//! ```text
//! "ASCM"  u32 version
//! u32 in_channels  u32 filters  u32 fusion  u32 n_scales  f64 scales[n]
//! u32 n_params     record[n]
//! u32 n_bn         (u32 name_len, name, f32 eps, f32 momentum,
//!                   u32 channels, f32 mean[c], f32 var[c])[n]
//! u8 has_optim     [u64 iteration, f32 base_lr, f32 momentum,
//!                   u32 n_params, record[n_params]]
//! u32 crc32 of everything above
//! record = u32 name_len, name, u32 rank, u32 extents[rank], f32 data[prod]
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Fusion, ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::trainer::OptimState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ASCM";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn name(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }

    fn floats(&mut self, v: &[f32]) {
        v.iter().for_each(|&x| self.f32(x));
    }

    fn record(&mut self, name: &str, t: &Tensor<f32>) {
        self.name(name);
        self.u32(t.shape().len());
        t.shape().iter().for_each(|&e| self.u32(e));
        self.floats(t.data());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::InvalidCheckpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::InvalidCheckpoint("record name is not UTF-8".into()))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::InvalidCheckpoint("record size overflows".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }

    fn record(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let name = self.name()?;
        let rank = self.u32()?;
        if rank > 8 {
            return Err(Error::InvalidCheckpoint(format!("record `{name}` has rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::InvalidCheckpoint(format!("record `{name}` is too large")))?;
        let data = self.floats(n)?;
        Ok((name, shape, data))
    }
}

/// Serializes a model and optionally its optimizer state.
pub fn encode_checkpoint(model: &ModelParams<f32>, optim: Option<&OptimState>) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION as usize);
    let c = &model.config;
    w.u32(c.in_channels);
    w.u32(c.filters);
    w.u32(c.fusion.code() as usize);
    w.u32(c.scales.len());
    c.scales.iter().for_each(|&s| w.f64(s));
    w.u32(model.tensors.len());
    for (name, t) in model.names.iter().zip(&model.tensors) {
        w.record(name, t);
    }
    w.u32(model.bn_states.len());
    for (name, s) in model.bn_names.iter().zip(&model.bn_states) {
        w.name(name);
        w.f32(s.eps);
        w.f32(s.momentum);
        w.u32(s.channels());
        w.floats(&s.running_mean);
        w.floats(&s.running_var);
    }
    match optim {
        None => w.u8(0),
        Some(o) => {
            if o.velocity.len() != model.tensors.len() {
                return Err(Error::shape(format!(
                    "{} velocities for {} parameters",
                    o.velocity.len(),
                    model.tensors.len()
                )));
            }
            w.u8(1);
            w.u64(o.iteration);
            w.f32(o.base_lr);
            w.f32(o.momentum);
            w.u32(o.velocity.len());
            for (name, v) in model.names.iter().zip(&o.velocity) {
                w.record(name, v);
            }
        }
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc as usize);
    Ok(w.0)
}

fn read_params(r: &mut Reader<'_>, model: &ModelParams<f32>, what: &str) -> Result<Vec<Tensor<f32>>> {
    let n = r.u32()?;
    if n != model.tensors.len() {
        return Err(Error::InvalidCheckpoint(format!(
            "{n} {what} records, architecture has {}",
            model.tensors.len()
        )));
    }
    let mut out: Vec<Option<Tensor<f32>>> = vec![None; n];
    for _ in 0..n {
        let (name, shape, data) = r.record()?;
        let i = model
            .index_of(&name)
            .ok_or_else(|| Error::InvalidCheckpoint(format!("unknown {what} record `{name}`")))?;
        let expected = model.tensors[i].shape();
        if shape != expected {
            return Err(Error::RecordShape {
                record: name,
                expected: expected.to_vec(),
                found: shape,
            });
        }
        if out[i].is_some() {
            return Err(Error::InvalidCheckpoint(format!("duplicate {what} record `{name}`")));
        }
        out[i] = Some(Tensor::new(shape, data)?);
    }
    Ok(out.into_iter().map(|t| t.expect("all records seen")).collect())
}

/// Parses a checkpoint. The checksum is verified before anything else.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams<f32>, Option<OptimState>)> {
    decode_checkpoint_for(bytes, None)
}

/// Parses a checkpoint into the architecture of `expected` when given.
/// Differing scales or fusion are [`Error::Incompatible`]; differing
/// channel counts surface as [`Error::RecordShape`] on the first
/// mismatching record.
pub fn decode_checkpoint_for(
    bytes: &[u8],
    expected: Option<&ModelConfig>,
) -> Result<(ModelParams<f32>, Option<OptimState>)> {
    if bytes.len() < 12 {
        return Err(Error::InvalidCheckpoint(format!("{} bytes is too short", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::InvalidCheckpoint("bad magic".into()));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let in_channels = r.u32()?;
    let filters = r.u32()?;
    let code = r.u32()? as u32;
    let fusion =
        Fusion::from_code(code).ok_or_else(|| Error::InvalidCheckpoint(format!("unknown fusion code {code}")))?;
    let n_scales = r.u32()?;
    if n_scales > 64 {
        return Err(Error::InvalidCheckpoint(format!("{n_scales} scales")));
    }
    let scales = (0..n_scales).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let config = ModelConfig {
        in_channels,
        filters,
        scales,
        fusion,
    };
    let config = match expected {
        None => config,
        Some(e) if e.scales != config.scales || e.fusion != config.fusion => {
            return Err(Error::Incompatible(format!(
                "checkpoint has scales {:?} with {} fusion, expected {:?} with {}",
                config.scales, config.fusion, e.scales, e.fusion
            )));
        }
        Some(e) => e.clone(),
    };
    let mut model =
        ModelParams::zeros(config).map_err(|e| Error::InvalidCheckpoint(format!("hyperparameters: {e}")))?;
    model.tensors = read_params(&mut r, &model, "parameter")?;

    let n_bn = r.u32()?;
    if n_bn != model.bn_states.len() {
        return Err(Error::InvalidCheckpoint(format!(
            "{n_bn} batchnorm records, architecture has {}",
            model.bn_states.len()
        )));
    }
    let mut seen = vec![false; n_bn];
    for _ in 0..n_bn {
        let name = r.name()?;
        let i = model
            .bn_names
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| Error::InvalidCheckpoint(format!("unknown batchnorm `{name}`")))?;
        let eps = r.f32()?;
        let momentum = r.f32()?;
        let c = r.u32()?;
        let expected = model.bn_states[i].channels();
        if c != expected {
            return Err(Error::RecordShape {
                record: name,
                expected: vec![expected],
                found: vec![c],
            });
        }
        if seen[i] {
            return Err(Error::InvalidCheckpoint(format!("duplicate batchnorm `{name}`")));
        }
        seen[i] = true;
        let s = &mut model.bn_states[i];
        s.eps = eps;
        s.momentum = momentum;
        s.running_mean = r.floats(c)?;
        s.running_var = r.floats(c)?;
    }

    let optim = match r.u8()? {
        0 => None,
        1 => {
            let iteration = r.u64()?;
            let base_lr = r.f32()?;
            let momentum = r.f32()?;
            let velocity = read_params(&mut r, &model, "velocity")?;
            Some(OptimState {
                velocity,
                iteration,
                base_lr,
                momentum,
            })
        }
        f => return Err(Error::InvalidCheckpoint(format!("optimizer flag {f}"))),
    };
    if r.pos != body.len() {
        return Err(Error::InvalidCheckpoint(format!(
            "{} trailing bytes",
            body.len() - r.pos
        )));
    }
    Ok((model, optim))
}

pub fn save_checkpoint(path: &Path, model: &ModelParams<f32>, optim: Option<&OptimState>) -> Result<()> {
    super::write_bytes(path, &encode_checkpoint(model, optim)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, Option<OptimState>)> {
    decode_checkpoint(&super::read_bytes(path)?)
}

/// Loads a checkpoint into the architecture of `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<(ModelParams<f32>, Option<OptimState>)> {
    decode_checkpoint_for(&super::read_bytes(path)?, Some(expected))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelParams<f32> {
        ModelParams::init(
            ModelConfig {
                in_channels: 1,
                filters: 4,
                scales: vec![1.0, 2.0],
                fusion: Fusion::Attention,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let mut m = small();
        m.bn_states[2].running_mean[1] = 0.25;
        let mut o = OptimState::new(&m.tensors, 0.002, 0.9);
        o.iteration = 17;
        o.velocity[3].data_mut()[0] = -1.5;
        let bytes = encode_checkpoint(&m, Some(&o)).unwrap();
        let (m2, o2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(m2, m);
        assert_eq!(o2.as_ref(), Some(&o));
        assert_eq!(encode_checkpoint(&m2, o2.as_ref()).unwrap(), bytes);
        let (_, none) = decode_checkpoint(&encode_checkpoint(&m, None).unwrap()).unwrap();
        assert!(none.is_none());
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let bytes = encode_checkpoint(&small(), None).unwrap();
        for pos in [0, 5, 40, bytes.len() / 2, bytes.len() - 5] {
            let mut b = bytes.clone();
            b[pos] ^= 0x10;
            assert!(matches!(decode_checkpoint(&b), Err(Error::Checksum { .. })), "{pos}");
        }
    }

    fn reseal(mut body: Vec<u8>) -> Vec<u8> {
        let crc = crc32fast::hash(&body);
        body.extend_from_slice(&crc.to_le_bytes());
        body
    }

    #[test]
    fn version_and_shape_errors() {
        let bytes = encode_checkpoint(&small(), None).unwrap();
        let mut body = bytes[..bytes.len() - 4].to_vec();
        body[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&reseal(body)),
            Err(Error::UnsupportedVersion(2))
        ));

        // first record is stem.weight [4, 1, 3, 3]; claim 5 output channels
        let mut body = bytes[..bytes.len() - 4].to_vec();
        let header = 4 + 4 + 16 + 16 + 4;
        let name_len = "stem.weight".len();
        let extent0 = header + 4 + name_len + 4;
        assert_eq!(&body[extent0..extent0 + 4], &4u32.to_le_bytes());
        body[extent0..extent0 + 4].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&reseal(body)),
            Err(Error::RecordShape { .. })
        ));
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = encode_checkpoint(&small(), None).unwrap();
        for cut in [3, 11, 100, bytes.len() - 1] {
            let b = reseal(bytes[..cut].to_vec());
            assert!(decode_checkpoint(&b).is_err());
        }
    }

    #[test]
    fn expected_config_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ascm");
        let m = small();
        save_checkpoint(&path, &m, None).unwrap();
        assert!(load_checkpoint_for(&path, &m.config).is_ok());
        let mut wider = m.config.clone();
        wider.filters = 8;
        match load_checkpoint_for(&path, &wider) {
            Err(Error::RecordShape { record, .. }) => assert_eq!(record, "stem.weight"),
            other => panic!("{other:?}"),
        }
        let mut other = m.config.clone();
        other.scales = vec![0.5, 1.0, 1.5, 2.0];
        assert!(matches!(
            load_checkpoint_for(&path, &other),
            Err(Error::Incompatible(_))
        ));
    }
}
