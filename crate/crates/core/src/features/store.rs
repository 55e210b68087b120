//! Binary feature store: utterance id -> log-Mel matrix.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic     b"WGFS"
//! version   u32
//! hdr_len   u32
//! header    hdr_len bytes of UTF-8 JSON: {"params": FeatureParams, "n_entries": N}
//! N times:
//!   id_len  u32, id (UTF-8)
//!   frames  u32, bands u32, n_valid u32
//!   values  frames*bands f32 (row-major, little-endian)
//! ```
//!
//! Entries are written in lexicographic id order, so identical stores produce
//! identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FeatureParams, LogMelSpectrogram};
use crate::error::{Error, Result};

pub const FEATURE_STORE_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"WGFS";

#[derive(Serialize, Deserialize)]
struct Header {
    params: FeatureParams,
    n_entries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    params: FeatureParams,
    entries: BTreeMap<String, LogMelSpectrogram>,
}

impl FeatureStore {
    pub fn new(params: FeatureParams) -> Self {
        FeatureStore { params, entries: BTreeMap::new() }
    }

    pub fn params(&self) -> &FeatureParams {
        &self.params
    }

    pub fn insert(&mut self, id: impl Into<String>, spec: LogMelSpectrogram) -> Result<()> {
        if spec.params() != &self.params {
            return Err(Error::ConfigMismatch(
                "spectrogram parameters differ from the store's".into(),
            ));
        }
        self.entries.insert(id.into(), spec);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&LogMelSpectrogram> {
        self.entries.get(id)
    }

    /// Like [`get`](Self::get) but errors on a missing id.
    pub fn require(&self, id: &str) -> Result<&LogMelSpectrogram> {
        self.get(id).ok_or_else(|| Error::MissingFeatures(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &LogMelSpectrogram)> {
        self.entries.iter()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            params: self.params.clone(),
            n_entries: self.entries.len(),
        })
        .expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FEATURE_STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (id, spec) in &self.entries {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.extend_from_slice(&(spec.n_frames() as u32).to_le_bytes());
            out.extend_from_slice(&(spec.n_bands() as u32).to_le_bytes());
            out.extend_from_slice(&(spec.n_valid() as u32).to_le_bytes());
            for v in spec.values().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Corrupt("not a feature store (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FEATURE_STORE_VERSION {
            return Err(Error::Version { found: version, expected: FEATURE_STORE_VERSION });
        }
        let hdr_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hdr_len)?)
            .map_err(|e| Error::Corrupt(format!("feature store header: {e}")))?;
        header.params.validate()?;
        let mut store = FeatureStore::new(header.params);
        for _ in 0..header.n_entries {
            let id_len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(id_len)?)
                .map_err(|_| Error::Corrupt("utterance id is not UTF-8".into()))?
                .to_string();
            let frames = r.u32()? as usize;
            let bands = r.u32()? as usize;
            let n_valid = r.u32()? as usize;
            let raw = r.take(frames * bands * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let values = Array2::from_shape_vec((frames, bands), data)
                .map_err(|e| Error::Corrupt(e.to_string()))?;
            let spec = LogMelSpectrogram::new(values, n_valid, store.params.clone())
                .map_err(|e| Error::Corrupt(format!("entry {id:?}: {e}")))?;
            store.entries.insert(id, spec);
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt("trailing bytes after last entry".into()));
        }
        Ok(store)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the serialized store, hex encoded.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Corrupt(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
