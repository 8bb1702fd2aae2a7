//! Weights file: `MFWT` magic, a little-endian header, then every tensor as
//! little-endian `f32` in [`Params::layout`] order. A JSON sidecar lists
//! names, shapes and byte offsets.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MFWT"
//! 4       4     version (u32)
//! 8       24    layers, heads, width, ff_width, vocab, max_len (u32 each)
//! 32      8     seed (u64)
//! 40      4     tensor count (u32)
//! 44      ...   tensor data
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Params, Weights};
use crate::error::{Error, Result};
use crate::fsio::{self, Provenance};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"MFWT";
pub const WEIGHTS_VERSION: u32 = 1;
const HEADER_BYTES: usize = 44;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the first element from the start of the file.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub magic: String,
    pub version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub total_bytes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn manifest(cfg: &ModelConfig) -> WeightsManifest {
    let mut offset = HEADER_BYTES;
    let tensors = Params::layout(cfg)
        .into_iter()
        .map(|(name, shape)| {
            let len = shape.iter().product::<usize>();
            let e = TensorEntry {
                name,
                shape,
                offset,
                len,
            };
            offset += 4 * len;
            e
        })
        .collect();
    WeightsManifest {
        magic: String::from_utf8_lossy(WEIGHTS_MAGIC).into_owned(),
        version: WEIGHTS_VERSION,
        dtype: "f32-le".into(),
        config: *cfg,
        tensors,
        total_bytes: offset,
        provenance: None,
    }
}

pub fn encode_weights(w: &Weights) -> Vec<u8> {
    let c = &w.config;
    let mut buf = Vec::with_capacity(HEADER_BYTES + 4 * w.params.num_params());
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    for v in [c.layers, c.heads, c.width, c.ff_width, c.vocab, c.max_len] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&c.seed.to_le_bytes());
    let tensors = w.params.tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        for &x in t {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    buf
}

pub fn decode_weights(bytes: &[u8]) -> Result<Weights> {
    let bad = |m: String| Error::format("weights file", m);
    if bytes.len() < HEADER_BYTES || &bytes[..4] != WEIGHTS_MAGIC {
        return Err(bad("missing magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != WEIGHTS_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let dims: Vec<usize> = (0..6).map(|i| u32_at(8 + 4 * i) as usize).collect();
    let seed = u64::from_le_bytes(bytes[32..40].try_into().expect("8 bytes"));
    let config = ModelConfig {
        layers: dims[0],
        heads: dims[1],
        width: dims[2],
        ff_width: dims[3],
        vocab: dims[4],
        max_len: dims[5],
        seed,
    };
    config.validate().map_err(|e| bad(e.to_string()))?;
    let m = manifest(&config);
    if u32_at(40) as usize != m.tensors.len() {
        return Err(bad(format!(
            "expected {} tensors, header says {}",
            m.tensors.len(),
            u32_at(40)
        )));
    }
    if bytes.len() != m.total_bytes {
        return Err(bad(format!("expected {} bytes, found {}", m.total_bytes, bytes.len())));
    }
    let mut w = Weights::zeros(config)?;
    for (t, entry) in w.params.tensors_mut().into_iter().zip(&m.tensors) {
        let raw = &bytes[entry.offset..entry.offset + 4 * entry.len];
        for (dst, chunk) in t.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f64::from(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
        }
    }
    Ok(w)
}

/// Writes the binary file and its JSON sidecar.
pub fn write_weights(path: &Path, w: &Weights, provenance: Option<&Provenance>) -> Result<()> {
    fsio::write_atomic(path, &encode_weights(w))?;
    let mut m = manifest(&w.config);
    m.provenance = provenance.cloned();
    fsio::write_json(&sidecar_path(path), &m)
}

pub fn read_weights(path: &Path) -> Result<Weights> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            width: 8,
            ff_width: 12,
            vocab: 10,
            max_len: 6,
            seed: 4,
        }
    }

    #[test]
    fn roundtrip_rounds_through_f32() {
        let w = Weights::init(cfg()).unwrap();
        let back = decode_weights(&encode_weights(&w)).unwrap();
        let mut rounded = w.clone();
        rounded.params.round_to_f32();
        assert_eq!(back, rounded);
    }

    #[test]
    fn header_layout_is_fixed() {
        let w = Weights::init(cfg()).unwrap();
        let bytes = encode_weights(&w);
        assert_eq!(&bytes[..4], b"MFWT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 8);
        let m = manifest(&w.config);
        assert_eq!(m.total_bytes, bytes.len());
        let first = f32::from_le_bytes(bytes[44..48].try_into().unwrap());
        assert_eq!(first, w.params.tok_emb[0] as f32);
        let last = m.tensors.last().unwrap();
        assert_eq!(last.name, "unembed");
        assert_eq!(last.offset + 4 * last.len, bytes.len());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let w = Weights::init(cfg()).unwrap();
        let mut bytes = encode_weights(&w);
        assert!(decode_weights(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode_weights(&bytes).is_err());
    }

    #[test]
    fn file_and_sidecar_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.bin");
        let w = Weights::init(cfg()).unwrap();
        write_weights(&path, &w, None).unwrap();
        let m: WeightsManifest = fsio::read_json(&sidecar_path(&path)).unwrap();
        assert_eq!(m.config, w.config);
        assert_eq!(read_weights(&path).unwrap().config, w.config);
    }
}
