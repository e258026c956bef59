//! Checkpoint container: magic `PCQC`, u16 version, an 8-byte configuration
//! hash, then length-prefixed named blocks of little-endian f64 values
//! holding every parameter, the optimizer moments, and the run counters.

use std::collections::HashMap;
use std::path::Path;

use crate::diffcore::NdArray;
use crate::model::QualityModel;

use super::adam::AdamState;
use super::TrainError;

pub const CKPT_MAGIC: &[u8; 4] = b"PCQC";
pub const CKPT_VERSION: u16 = 1;

/// Run counters restored alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainProgress {
    pub epoch: usize,
    pub seed: u64,
}

fn write_block(out: &mut Vec<u8>, name: &str, data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes model parameters, optimizer moments, the trainable mask, and
/// run counters. Byte-deterministic given equal state.
pub fn checkpoint_bytes(
    model: &QualityModel,
    adam: &AdamState,
    progress: TrainProgress,
    config_hash: [u8; 8],
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&config_hash);
    write_block(&mut out, "__epoch", &[progress.epoch as f64]);
    write_block(&mut out, "__seed", &[f64::from_bits(progress.seed)]);
    write_block(&mut out, "__opt_step", &[adam.step as f64]);
    let mut mask = Vec::new();
    model.visit_params(&mut |_, p| mask.push(if p.trainable { 1.0 } else { 0.0 }));
    write_block(&mut out, "__trainable", &mask);
    model.visit_params(&mut |name, p| {
        write_block(&mut out, &format!("param.{name}"), p.value.data());
    });
    for (name, m, v) in &adam.moments {
        write_block(&mut out, &format!("opt.m.{name}"), m.data());
        write_block(&mut out, &format!("opt.v.{name}"), v.data());
    }
    out
}

pub fn save_checkpoint(
    path: &Path,
    model: &QualityModel,
    adam: &AdamState,
    progress: TrainProgress,
    config_hash: [u8; 8],
) -> Result<(), TrainError> {
    std::fs::write(path, checkpoint_bytes(model, adam, progress, config_hash))?;
    Ok(())
}

fn parse_blocks(bytes: &[u8]) -> Result<HashMap<String, Vec<f64>>, TrainError> {
    let mut blocks = HashMap::new();
    let mut pos = 0usize;
    while pos < bytes.len() {
        if pos + 4 > bytes.len() {
            return Err(TrainError::CorruptCheckpoint("truncated block name length".into()));
        }
        let name_len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("bounds")) as usize;
        pos += 4;
        if pos + name_len > bytes.len() {
            return Err(TrainError::CorruptCheckpoint("truncated block name".into()));
        }
        let name = String::from_utf8(bytes[pos..pos + name_len].to_vec())
            .map_err(|_| TrainError::CorruptCheckpoint("block name is not UTF-8".into()))?;
        pos += name_len;
        if pos + 8 > bytes.len() {
            return Err(TrainError::CorruptCheckpoint("truncated block count".into()));
        }
        let count = u64::from_le_bytes(bytes[pos..pos + 8].try_into().expect("bounds")) as usize;
        pos += 8;
        if pos + count * 8 > bytes.len() {
            return Err(TrainError::CorruptCheckpoint(format!(
                "block `{name}` larger than file"
            )));
        }
        let data: Vec<f64> = bytes[pos..pos + count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk")))
            .collect();
        pos += count * 8;
        if blocks.insert(name.clone(), data).is_some() {
            return Err(TrainError::CorruptCheckpoint(format!("duplicate block `{name}`")));
        }
    }
    Ok(blocks)
}

/// Restores a checkpoint into a freshly initialized model of the same
/// configuration. The configuration hash must match the one stored at save
/// time.
pub fn load_checkpoint(
    path: &Path,
    model: &mut QualityModel,
    expected_hash: [u8; 8],
) -> Result<(AdamState, TrainProgress), TrainError> {
    let bytes = std::fs::read(path)?;
    load_checkpoint_bytes(&bytes, model, expected_hash)
}

pub fn load_checkpoint_bytes(
    bytes: &[u8],
    model: &mut QualityModel,
    expected_hash: [u8; 8],
) -> Result<(AdamState, TrainProgress), TrainError> {
    if bytes.len() < 14 || &bytes[..4] != CKPT_MAGIC {
        return Err(TrainError::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CKPT_VERSION {
        return Err(TrainError::CorruptCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let hash: [u8; 8] = bytes[6..14].try_into().expect("bounds");
    if hash != expected_hash {
        return Err(TrainError::HashMismatch);
    }
    let mut blocks = parse_blocks(&bytes[14..])?;

    let take_scalar = |blocks: &mut HashMap<String, Vec<f64>>, name: &str| {
        blocks
            .remove(name)
            .filter(|v| v.len() == 1)
            .map(|v| v[0])
            .ok_or_else(|| TrainError::CorruptCheckpoint(format!("missing block `{name}`")))
    };
    let epoch = take_scalar(&mut blocks, "__epoch")? as usize;
    let seed = take_scalar(&mut blocks, "__seed")?.to_bits();
    let opt_step = take_scalar(&mut blocks, "__opt_step")? as u64;
    let mask = blocks
        .remove("__trainable")
        .ok_or_else(|| TrainError::CorruptCheckpoint("missing trainable mask".into()))?;

    let mut errors: Vec<String> = Vec::new();
    let mut mask_cursor = 0usize;
    model.visit_params_mut(&mut |name, p| {
        if mask_cursor < mask.len() && (mask[mask_cursor] > 0.5) != p.trainable {
            errors.push(format!("trainable flag mismatch for `{name}`"));
        }
        mask_cursor += 1;
        match blocks.remove(&format!("param.{name}")) {
            Some(data) if data.len() == p.value.len() => {
                let shape = p.value.shape().to_vec();
                p.value = NdArray::from_vec(shape, data).expect("length checked");
            }
            Some(_) => errors.push(format!("size mismatch for `{name}`")),
            None => errors.push(format!("missing parameter `{name}`")),
        }
    });
    if mask_cursor != mask.len() {
        errors.push("trainable mask length mismatch".into());
    }

    let mut adam = AdamState::init(model);
    adam.step = opt_step;
    for (name, m, v) in &mut adam.moments {
        for (tensor, key) in [(&mut *m, format!("opt.m.{name}")), (&mut *v, format!("opt.v.{name}"))] {
            match blocks.remove(&key) {
                Some(data) if data.len() == tensor.len() => {
                    let shape = tensor.shape().to_vec();
                    *tensor = NdArray::from_vec(shape, data).expect("length checked");
                }
                _ => errors.push(format!("missing or mis-sized block `{key}`")),
            }
        }
    }
    if !blocks.is_empty() {
        errors.push(format!(
            "unexpected blocks: {:?}",
            blocks.keys().collect::<Vec<_>>()
        ));
    }
    if let Some(e) = errors.into_iter().next() {
        return Err(TrainError::CorruptCheckpoint(e));
    }
    Ok((adam, TrainProgress { epoch, seed }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, QualityModel};

    fn tiny_model() -> QualityModel {
        let mut cfg = ModelConfig::default();
        cfg.vit.image_size = 16;
        cfg.vit.patch_size = 8;
        cfg.vit.dim = 16;
        cfg.vit.blocks = 1;
        cfg.vit.heads = 2;
        cfg.context_tokens = 4;
        cfg.seed = 3;
        QualityModel::init(cfg).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = tiny_model();
        let adam = AdamState::init(&model);
        let progress = TrainProgress { epoch: 7, seed: 42 };
        let hash = [1, 2, 3, 4, 5, 6, 7, 8];
        let bytes = checkpoint_bytes(&model, &adam, progress, hash);

        let mut restored = tiny_model();
        let (adam2, progress2) = load_checkpoint_bytes(&bytes, &mut restored, hash).unwrap();
        assert_eq!(progress2, progress);
        let bytes2 = checkpoint_bytes(&restored, &adam2, progress2, hash);
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn tampered_hash_is_rejected() {
        let model = tiny_model();
        let adam = AdamState::init(&model);
        let progress = TrainProgress { epoch: 0, seed: 1 };
        let bytes = checkpoint_bytes(&model, &adam, progress, [9; 8]);
        let mut restored = tiny_model();
        assert!(matches!(
            load_checkpoint_bytes(&bytes, &mut restored, [8; 8]),
            Err(TrainError::HashMismatch)
        ));
    }

    #[test]
    fn bad_magic_and_truncation_are_rejected() {
        let model = tiny_model();
        let adam = AdamState::init(&model);
        let progress = TrainProgress { epoch: 0, seed: 1 };
        let mut bytes = checkpoint_bytes(&model, &adam, progress, [0; 8]);
        let mut restored = tiny_model();
        bytes[0] = b'X';
        assert!(matches!(
            load_checkpoint_bytes(&bytes, &mut restored, [0; 8]),
            Err(TrainError::BadMagic)
        ));
        let bytes = checkpoint_bytes(&model, &adam, progress, [0; 8]);
        let truncated = &bytes[..bytes.len() - 5];
        assert!(matches!(
            load_checkpoint_bytes(truncated, &mut restored, [0; 8]),
            Err(TrainError::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn seed_bits_survive_round_trip() {
        let model = tiny_model();
        let adam = AdamState::init(&model);
        for seed in [0u64, u64::MAX, 0x7FF8_0000_0000_0001 /* NaN pattern */] {
            let progress = TrainProgress { epoch: 1, seed };
            let bytes = checkpoint_bytes(&model, &adam, progress, [0; 8]);
            let mut restored = tiny_model();
            let (_, p) = load_checkpoint_bytes(&bytes, &mut restored, [0; 8]).unwrap();
            assert_eq!(p.seed, seed);
        }
    }
}
