//! TPMB checkpoints.
//!
//! Layout: `b"TPMB"`, `u32` format version, `u32` header length, a UTF-8 JSON
//! header, then the payload of little-endian tensor data in manifest order.
//! The header records every tensor's offset and length within the payload,
//! the run configuration as ordered key/value pairs, the seed, and the CRC32
//! of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"TPMB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_len: u64,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub seed: u64,
    pub config: Vec<(String, String)>,
    pub tensors: Vec<TensorEntry>,
    pub payload_crc32: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub payload: Vec<u8>,
}

fn ckpt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

impl Checkpoint {
    pub fn from_store<T: Real>(store: &ParamStore<T>, config: Vec<(String, String)>, seed: u64) -> Self {
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(store.len());
        for (_, p) in store.iter() {
            let start = payload.len() as u64;
            for &v in p.value.data() {
                v.write_le(&mut payload);
            }
            tensors.push(TensorEntry {
                name: p.name.clone(),
                dtype: T::DTYPE.to_string(),
                shape: p.value.shape().to_vec(),
                byte_offset: start,
                byte_len: payload.len() as u64 - start,
                trainable: p.trainable,
            });
        }
        let payload_crc32 = crc32fast::hash(&payload);
        Self { header: Header { seed, config, tensors, payload_crc32 }, payload }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Checkpoint(format!("header encoding: {e}")))?;
        let header_len = u32::try_from(header.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
        let mut out = Vec::with_capacity(12 + header.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return ckpt_err("not a TPMB checkpoint");
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return ckpt_err(format!("unsupported checkpoint version {version} (expected {FORMAT_VERSION})"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let Some(hbytes) = bytes.get(12..12 + hlen) else {
            return ckpt_err("truncated header");
        };
        let header: Header = serde_json::from_slice(hbytes).map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        let payload = bytes[12 + hlen..].to_vec();
        let mut expected_offset = 0u64;
        for t in &header.tensors {
            let width = match t.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return ckpt_err(format!("{}: unknown dtype {other}", t.name)),
            };
            if t.byte_offset != expected_offset || t.byte_len != (numel(&t.shape) * width) as u64 {
                return ckpt_err(format!("{}: manifest extent does not match its shape or position", t.name));
            }
            expected_offset += t.byte_len;
        }
        if expected_offset != payload.len() as u64 {
            return ckpt_err(format!("payload is {} bytes but the manifest covers {expected_offset}", payload.len()));
        }
        if crc32fast::hash(&payload) != header.payload_crc32 {
            return ckpt_err("payload checksum mismatch");
        }
        Ok(Self { header, payload })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.header.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Copies every tensor into `store`, which must hold exactly the same
    /// names, shapes and dtype.
    pub fn restore<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for t in &self.header.tensors {
            let Some(id) = store.id(&t.name) else {
                return ckpt_err(format!("unknown tensor {}", t.name));
            };
            let p = store.get(id);
            if p.value.shape() != t.shape.as_slice() {
                return ckpt_err(format!("shape mismatch for {}: checkpoint {:?}, model {:?}", t.name, t.shape, p.value.shape()));
            }
            if t.dtype != T::DTYPE {
                return ckpt_err(format!("dtype mismatch for {}: checkpoint {}, model {}", t.name, t.dtype, T::DTYPE));
            }
        }
        if self.header.tensors.len() != store.len() {
            let missing = store.iter().map(|(_, p)| &p.name).find(|n| !self.header.tensors.iter().any(|t| &t.name == *n));
            return ckpt_err(format!("checkpoint lacks tensor {}", missing.map(String::as_str).unwrap_or("?")));
        }
        for t in &self.header.tensors {
            let id = store.id(&t.name).expect("checked above");
            let bytes = &self.payload[t.byte_offset as usize..(t.byte_offset + t.byte_len) as usize];
            let data: Vec<T> = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
            store.get_mut(id).value = Tensor::from_vec(&t.shape, data);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(r: usize) -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = ParamStore::new();
        s.add("a", Tensor::randn(&[3, r], 1.0, &mut rng), true);
        s.add("b", Tensor::randn(&[4], 1.0, &mut rng), false);
        s
    }

    #[test]
    fn save_load_save_identical() {
        let s = store(2);
        let ck = Checkpoint::from_store(&s, vec![("k".into(), "v".into())], 7);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        let mut s2 = store(2);
        s2.get_mut(s2.id("a").unwrap()).value = Tensor::zeros(&[3, 2]);
        back.restore(&mut s2).unwrap();
        let again = Checkpoint::from_store(&s2, vec![("k".into(), "v".into())], 7).to_bytes().unwrap();
        assert_eq!(bytes, again);
        assert_eq!(back.config_value("k"), Some("v"));
    }

    #[test]
    fn corruption_and_mismatch_detected() {
        let s = store(2);
        let mut bytes = Checkpoint::from_store(&s, vec![], 0).to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(m)) if m.contains("checksum")));
        assert!(Checkpoint::from_bytes(&bytes[..n - 4]).is_err());
        let ck = Checkpoint::from_store(&s, vec![], 0);
        let err = ck.restore(&mut store(3)).unwrap_err();
        assert!(err.to_string().contains("a"), "{err}");
        let mut wrong_version = ck.to_bytes().unwrap();
        wrong_version[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&wrong_version), Err(Error::Checkpoint(m)) if m.contains("version")));
    }
}
