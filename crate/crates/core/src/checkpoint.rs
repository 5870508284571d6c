//! Binary checkpoint format.
//!
//! ```text
//! "FERCKPT1"                      8 bytes
//! architecture digest            16 bytes (SHA-256 prefix of FerConfig::describe)
//! tensor count                   u32 LE
//! per tensor:
//!   name length                  u16 LE
//!   name                         UTF-8
//!   rank                         u8
//!   dims                         u32 LE each
//!   data                         f32 LE, row-major
//! ```
//!
//! The first tensor, `meta.arch`, holds
//! `[input_size, kernel_size, conv_channels.., dense_sizes.., dropout]` so a
//! checkpoint can be loaded without knowing its architecture up front.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, FerError, Result};
use crate::model::{FerConfig, FerModel, NUM_BLOCKS, NUM_DENSE};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FERCKPT1";
const META_NAME: &str = "meta.arch";
const META_LEN: usize = 2 + NUM_BLOCKS + NUM_DENSE + 1;

pub fn architecture_digest(config: &FerConfig) -> [u8; 16] {
    let full = Sha256::digest(config.describe().as_bytes());
    let mut out = [0u8; 16];
    out.copy_from_slice(&full[..16]);
    out
}

fn meta_tensor(config: &FerConfig) -> Tensor<f32> {
    let mut v = vec![config.input_size as f32, config.kernel_size as f32];
    v.extend(config.conv_channels.iter().map(|&c| c as f32));
    v.extend(config.dense_sizes.iter().map(|&c| c as f32));
    v.push(config.dropout as f32);
    Tensor::new(vec![META_LEN], v).expect("meta layout is fixed")
}

fn config_from_meta(meta: &Tensor<f32>) -> Result<FerConfig, CheckpointError> {
    let v = meta.data();
    if v.len() != META_LEN {
        return Err(CheckpointError::Malformed(format!(
            "{META_NAME} has {} entries, expected {META_LEN}",
            v.len()
        )));
    }
    let as_usize = |x: f32| -> Result<usize, CheckpointError> {
        if x >= 0.0 && x.fract() == 0.0 && x < 1e9 {
            Ok(x as usize)
        } else {
            Err(CheckpointError::Malformed(format!(
                "{META_NAME} entry {x} is not a size"
            )))
        }
    };
    let mut conv_channels = [0; NUM_BLOCKS];
    for (i, c) in conv_channels.iter_mut().enumerate() {
        *c = as_usize(v[2 + i])?;
    }
    let mut dense_sizes = [0; NUM_DENSE];
    for (i, d) in dense_sizes.iter_mut().enumerate() {
        *d = as_usize(v[2 + NUM_BLOCKS + i])?;
    }
    let dropout = (v[META_LEN - 1] as f64 * 1e6).round() / 1e6;
    let config = FerConfig {
        input_size: as_usize(v[0])?,
        kernel_size: as_usize(v[1])?,
        conv_channels,
        dense_sizes,
        dropout,
        ..FerConfig::default()
    };
    config
        .validate()
        .map_err(|e| CheckpointError::ArchitectureMismatch(e.to_string()))?;
    Ok(config)
}

/// Every stored tensor with its name, in file order.
fn named_tensors(model: &FerModel<f32>) -> Vec<(String, Tensor<f32>)> {
    let mut out = vec![(META_NAME.to_string(), meta_tensor(model.config()))];
    for (i, b) in model.blocks.iter().enumerate() {
        let populated = if b.stats.populated { 1.0 } else { 0.0 };
        out.push((format!("block{i}.bn.gamma"), b.gamma.value.clone()));
        out.push((format!("block{i}.bn.beta"), b.beta.value.clone()));
        out.push((format!("block{i}.bn.running_mean"), b.stats.mean.clone()));
        out.push((format!("block{i}.bn.running_var"), b.stats.var.clone()));
        out.push((
            format!("block{i}.bn.populated"),
            Tensor::full(&[1], populated),
        ));
        out.push((format!("block{i}.conv.kernels"), b.kernels.value.clone()));
        out.push((format!("block{i}.conv.bias"), b.bias.value.clone()));
    }
    for (i, d) in model.dense.iter().enumerate() {
        out.push((format!("dense{i}.weights"), d.weights.value.clone()));
        out.push((format!("dense{i}.bias"), d.bias.value.clone()));
    }
    out
}

pub fn encode_checkpoint(model: &FerModel<f32>) -> Vec<u8> {
    let tensors = named_tensors(model);
    let mut buf = Vec::with_capacity(4 * model.parameter_count() + 4096);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&architecture_digest(model.config()));
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>), CheckpointError> {
        let name_len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("{name}: shape overflows")))?;
        let raw = self.take(len.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

/// Decodes a checkpoint, refusing files whose header digest disagrees with the
/// architecture they describe. No partial model is ever returned.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<FerModel<f32>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(MAGIC.len()).map_err(|_| {
        if MAGIC.starts_with(bytes) {
            CheckpointError::Truncated
        } else {
            CheckpointError::BadMagic
        }
    })?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let digest: [u8; 16] = r.take(16)?.try_into().unwrap();
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        tensors.push(r.tensor()?);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }

    let meta = match tensors.first() {
        Some((name, t)) if name == META_NAME => t,
        _ => {
            return Err(CheckpointError::Malformed(format!(
                "first tensor must be {META_NAME}"
            )))
        }
    };
    let config = config_from_meta(meta)?;
    if architecture_digest(&config) != digest {
        return Err(CheckpointError::ArchitectureMismatch(
            "header digest does not match the stored layer description".into(),
        ));
    }

    let mut model = FerModel::<f32>::new(config).map_err(|e| {
        CheckpointError::ArchitectureMismatch(e.to_string())
    })?;
    let expected = named_tensors(&model);
    if expected.len() != tensors.len() {
        return Err(CheckpointError::ArchitectureMismatch(format!(
            "expected {} tensors, found {}",
            expected.len(),
            tensors.len()
        )));
    }
    let mut by_name: HashMap<String, Tensor<f32>> = tensors.into_iter().collect();
    for (name, t) in &expected {
        match by_name.get(name) {
            Some(found) if found.shape() == t.shape() => {}
            Some(found) => {
                return Err(CheckpointError::ArchitectureMismatch(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    t.shape(),
                    found.shape()
                )))
            }
            None => {
                return Err(CheckpointError::ArchitectureMismatch(format!(
                    "missing tensor {name}"
                )))
            }
        }
    }
    let mut take = |name: String| by_name.remove(&name).expect("presence checked above");
    for (i, b) in model.blocks.iter_mut().enumerate() {
        b.gamma.value = take(format!("block{i}.bn.gamma"));
        b.beta.value = take(format!("block{i}.bn.beta"));
        b.stats.mean = take(format!("block{i}.bn.running_mean"));
        b.stats.var = take(format!("block{i}.bn.running_var"));
        b.stats.populated = take(format!("block{i}.bn.populated")).data()[0] != 0.0;
        b.kernels.value = take(format!("block{i}.conv.kernels"));
        b.bias.value = take(format!("block{i}.conv.bias"));
    }
    for (i, d) in model.dense.iter_mut().enumerate() {
        d.weights.value = take(format!("dense{i}.weights"));
        d.bias.value = take(format!("dense{i}.bias"));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &FerModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| FerError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<FerModel<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| FerError::io(path, e))?;
    Ok(decode_checkpoint(&bytes)?)
}

/// Loads a checkpoint and additionally requires it to match `expected`'s architecture.
pub fn load_checkpoint_expecting(
    path: impl AsRef<Path>,
    expected: &FerConfig,
) -> Result<FerModel<f32>> {
    let model = load_checkpoint(path)?;
    if architecture_digest(model.config()) != architecture_digest(expected) {
        return Err(CheckpointError::ArchitectureMismatch(format!(
            "checkpoint holds {:?}/{:?} (kernel {}), expected {:?}/{:?} (kernel {})",
            model.config().conv_channels,
            model.config().dense_sizes,
            model.config().kernel_size,
            expected.conv_channels,
            expected.dense_sizes,
            expected.kernel_size,
        ))
        .into());
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FerModel<f32> {
        FerModel::new(FerConfig {
            input_size: 16,
            conv_channels: [2, 2, 2, 2],
            dense_sizes: [3, 3, 7],
            ..FerConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_bit_exact() {
        let mut m = tiny();
        m.blocks[1].stats.populated = true;
        m.blocks[1].stats.mean.data_mut()[0] = 0.125;
        let back = decode_checkpoint(&encode_checkpoint(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn every_truncation_is_reported() {
        let bytes = encode_checkpoint(&tiny());
        for cut in [0, 3, 8, 20, 27, 40, bytes.len() / 2, bytes.len() - 1] {
            match decode_checkpoint(&bytes[..cut]) {
                Err(CheckpointError::Truncated) => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_checkpoint(&tiny());
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn digest_mismatch() {
        let mut bytes = encode_checkpoint(&tiny());
        bytes[10] ^= 0xff;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(CheckpointError::ArchitectureMismatch(_))
        ));
    }

    #[test]
    fn default_digest_is_stable() {
        assert_eq!(
            architecture_digest(&FerConfig::default()),
            architecture_digest(&FerConfig {
                seed: 99,
                ..FerConfig::default()
            })
        );
        assert_ne!(
            architecture_digest(&FerConfig::default()),
            architecture_digest(&FerConfig::reduced())
        );
    }
}
