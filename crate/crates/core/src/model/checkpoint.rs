//! Checkpoint container.
//!
//! ```text
//! magic    b"WGCK"
//! version  u32 LE
//! hdr_len  u32 LE
//! header   JSON: config, seed, meta, tensor table (name + shape), payload SHA-256
//! payload  every tensor in table order, row-major little-endian f32
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::Params;
use super::{Model, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"WGCK";

/// Training provenance stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    pub val_loss: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    seed: u64,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Model<f32> {
    pub fn to_checkpoint_bytes(&self, meta: &CheckpointMeta) -> Vec<u8> {
        let tensors = self.params.tensors();
        let mut payload = Vec::with_capacity(4 * self.parameter_count());
        for t in &tensors {
            for v in t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            config: self.config.clone(),
            seed: self.seed,
            meta: meta.clone(),
            tensors: tensors.iter().map(|t| TensorEntry { name: t.name.clone(), shape: t.shape.clone() }).collect(),
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(Self, CheckpointMeta)> {
        let corrupt = |m: &str| Error::Corrupt(format!("checkpoint: {m}"));
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic or truncated header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let hdr_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + hdr_len).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| corrupt(&e.to_string()))?;
        let payload = &bytes[12 + hdr_len..];
        if hex(&Sha256::digest(payload)) != header.payload_sha256 {
            return Err(corrupt("payload checksum mismatch"));
        }
        header.config.validate()?;
        let mut params = Params::<f32>::init(&header.config, header.seed);
        {
            let mut slots = params.tensors_mut();
            if slots.len() != header.tensors.len() {
                return Err(corrupt("tensor count differs from config"));
            }
            let mut pos = 0;
            for (slot, entry) in slots.iter_mut().zip(&header.tensors) {
                if slot.name != entry.name || slot.shape != entry.shape {
                    return Err(corrupt(&format!("tensor {} does not match config", entry.name)));
                }
                let n = slot.data.len() * 4;
                let raw = payload.get(pos..pos + n).ok_or_else(|| corrupt("truncated payload"))?;
                for (d, c) in slot.data.iter_mut().zip(raw.chunks_exact(4)) {
                    *d = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                }
                pos += n;
            }
            if pos != payload.len() {
                return Err(corrupt("trailing payload bytes"));
            }
        }
        Ok((Model::from_parts(header.config, header.seed, params), header.meta))
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: &CheckpointMeta) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes(meta))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, CheckpointMeta)> {
        Self::from_checkpoint_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureParams, LogMelSpectrogram};
    use crate::model::{tests::tiny_config, Variant};
    use ndarray::Array2;

    #[test]
    fn save_load_forward_identical() {
        let mut m = Model::<f32>::build(tiny_config(Variant::AePred), 5).unwrap();
        // perturb away from the init so loading cannot just re-initialize
        for t in m.params.tensors_mut() {
            for (i, v) in t.data.iter_mut().enumerate() {
                *v += (i % 7) as f32 * 1e-3;
            }
        }
        let meta = CheckpointMeta { epoch: 3, seed: 5, val_loss: Some(0.25) };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wgck");
        m.save(&path, &meta).unwrap();
        let (back, meta2) = Model::<f32>::load(&path).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(back, m);
        let p = FeatureParams { n_mel_bands: 8, ..Default::default() };
        let spec = LogMelSpectrogram::new(Array2::from_shape_fn((32, 8), |(t, f)| ((t + f) as f32).sin()), 28, p).unwrap();
        let a = m.forward_one(&spec, &m.layers()).unwrap();
        let b = back.forward_one(&spec, &back.layers()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_and_truncated() {
        let m = Model::<f32>::build(tiny_config(Variant::Full), 1).unwrap();
        let bytes = m.to_checkpoint_bytes(&CheckpointMeta::default());
        for cut in [0, 8, 40, bytes.len() - 3] {
            assert!(matches!(Model::from_checkpoint_bytes(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x40;
        assert!(matches!(Model::from_checkpoint_bytes(&flipped), Err(Error::Corrupt(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Model::from_checkpoint_bytes(&v2), Err(Error::Version { found: 2, expected: 1 })));
    }

    #[test]
    fn vocabulary_mismatch_is_explicit() {
        let m = Model::<f32>::build(tiny_config(Variant::Full), 1).unwrap();
        let (back, _) = Model::from_checkpoint_bytes(&m.to_checkpoint_bytes(&CheckpointMeta::default())).unwrap();
        assert!(back.check_vocabulary(3).is_ok());
        assert!(matches!(back.check_vocabulary(60), Err(Error::ConfigMismatch(_))));
    }
}
