//! HSQW checkpoints.
//!
//! Layout, all little-endian: magic `HSQW`, version `u32`, header length
//! `u32`, a UTF-8 JSON header holding the model configuration, channel counts
//! and routing seed, then one blob per parameter until end of file: name
//! length `u32`, UTF-8 name, rows `u64`, cols `u64`, `rows·cols` `f32`
//! values.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HsqModel, ModelConfig};
use crate::error::{FormatError, HsqError, Result};
use crate::numerics::{Matrix, Module};
use crate::pyramid::ByteReader;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HSQW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    cnn_channels: [usize; 4],
    vit_channels: [usize; 4],
    routing_seed: u64,
}

impl HsqModel {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            cnn_channels: self.channels.0,
            vit_channels: self.channels.1,
            routing_seed: self.routing_seed,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.params() {
            let m = p.value();
            out.extend_from_slice(&(p.name().len() as u32).to_le_bytes());
            out.extend_from_slice(p.name().as_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for &v in m.as_slice() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.array::<4>("magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            }
            .into());
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            }
            .into());
        }
        let len = r.u32("header length")? as usize;
        let header: Header = serde_json::from_slice(r.take(len, "header")?)
            .map_err(|e| FormatError::Malformed(format!("checkpoint header: {e}")))?;
        let mut blobs: HashMap<String, Matrix> = HashMap::new();
        while r.remaining() > 0 {
            let n = r.u32("parameter name length")? as usize;
            let name = String::from_utf8(r.take(n, "parameter name")?.to_vec())
                .map_err(|_| FormatError::Malformed("parameter name is not UTF-8".into()))?;
            let rows = r.u64(&format!("`{name}` rows"))? as usize;
            let cols = r.u64(&format!("`{name}` cols"))? as usize;
            let count = rows
                .checked_mul(cols)
                .ok_or_else(|| FormatError::Malformed(format!("`{name}` shape overflows")))?;
            let data = r.f32s(count, &format!("`{name}` payload"))?;
            let m = Matrix::from_vec(rows, cols, data)
                .map_err(|e| FormatError::Malformed(e.to_string()))?;
            if blobs.insert(name.clone(), m).is_some() {
                return Err(FormatError::Malformed(format!("parameter `{name}` appears twice")).into());
            }
        }
        let mut model = HsqModel::build_with(
            header.config,
            header.cnn_channels,
            header.vit_channels,
            header.routing_seed,
        )?;
        for p in model.params_mut() {
            let m = blobs
                .remove(p.name())
                .ok_or_else(|| FormatError::Malformed(format!("parameter `{}` missing", p.name())))?;
            if m.shape() != p.value().shape() {
                return Err(FormatError::Malformed(format!(
                    "parameter `{}` is {}x{}, the configuration requires {}x{}",
                    p.name(),
                    m.rows(),
                    m.cols(),
                    p.value().rows(),
                    p.value().cols()
                ))
                .into());
            }
            if !m.is_finite() {
                return Err(FormatError::Malformed(format!("parameter `{}` is not finite", p.name())).into());
            }
            p.set(m);
        }
        if let Some(extra) = blobs.keys().min() {
            return Err(FormatError::Malformed(format!("unexpected parameter `{extra}`")).into());
        }
        Ok(model)
    }
}

pub fn save_checkpoint(m: &HsqModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, m.to_checkpoint_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<HsqModel> {
    let bytes = fs::read(path).map_err(HsqError::from)?;
    HsqModel::from_checkpoint_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Preset;

    fn tiny() -> HsqModel {
        let cfg = ModelConfig {
            queries: 3,
            dim: 4,
            stage_depths: [1, 1, 1, 1],
            experts: 2,
            top_k: 1,
            ..ModelConfig::preset(Preset::Small)
        };
        HsqModel::build_with(cfg, [2, 3, 4, 5], [5, 4, 3, 2], 11).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = tiny();
        let bytes = m.to_checkpoint_bytes();
        let back = HsqModel::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back.to_checkpoint_bytes(), bytes);
        assert_eq!(back.config(), m.config());
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.value(), b.value());
        }
    }

    #[test]
    fn corruption_is_classified() {
        let bytes = tiny().to_checkpoint_bytes();
        let err = |b: &[u8]| HsqModel::from_checkpoint_bytes(b).unwrap_err();
        let mut bad = bytes.clone();
        bad[3] = b'X';
        assert!(matches!(err(&bad), HsqError::Format(FormatError::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(err(&bad), HsqError::Format(FormatError::Version { found: 9, .. })));
        assert!(matches!(
            err(&bytes[..bytes.len() - 2]),
            HsqError::Format(FormatError::Truncated { .. })
        ));
        assert!(matches!(err(&bytes[..40]), HsqError::Format(FormatError::Truncated { .. })));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = tiny();
        let mut other = tiny();
        other.queries.set(Matrix::zeros(2, 4));
        let mut bytes = m.to_checkpoint_bytes();
        // Swap in the blobs of a model whose query set has the wrong shape.
        let header_end = 12 + u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let other_bytes = other.to_checkpoint_bytes();
        bytes.truncate(header_end);
        bytes.extend_from_slice(&other_bytes[header_end..]);
        let e = HsqModel::from_checkpoint_bytes(&bytes).unwrap_err();
        assert!(e.to_string().contains("queries"), "{e}");
    }
}
