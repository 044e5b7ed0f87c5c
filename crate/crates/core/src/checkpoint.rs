//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `SDECKPT1`, `u32` version, `u64` header
//! length, TOML header, the parameter arrays as `f64` in header order, and a
//! SHA-256 digest of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Forecaster, Model, ModelSpec};
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"SDECKPT1";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    model: ModelSpec,
    train: Option<TrainConfig>,
    best_val: Option<f64>,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainConfig>,
    pub best_val: Option<f64>,
}

impl Checkpoint {
    pub fn new(model: Model, train: Option<TrainConfig>, best_val: Option<f64>) -> Self {
        Self { model, train, best_val }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = self.model.params();
        let header = Header {
            model: self.model.spec(),
            train: self.train.clone(),
            best_val: self.best_val,
            arrays: store.iter().map(|(n, t)| ArrayEntry { name: n.to_string(), shape: t.shape().to_vec() }).collect(),
        };
        let text = toml::to_string(&header).map_err(|e| Error::Format(format!("cannot encode header: {e}")))?;
        let mut out = Vec::with_capacity(24 + text.len() + 8 * store.num_scalars() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for t in store.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let truncated = || Error::Integrity("checkpoint is truncated".into());
        let version = u32::from_le_bytes(bytes.get(8..12).ok_or_else(truncated)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        if bytes.len() < 20 + DIGEST_LEN {
            return Err(truncated());
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checksum mismatch (truncated or corrupted file)".into()));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let text = body.get(20..20 + header_len).ok_or_else(truncated)?;
        let text = std::str::from_utf8(text).map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let header: Header = toml::from_str(text).map_err(|e| Error::Format(format!("bad header: {e}")))?;

        let mut model = header.model.build(0)?;
        let store = model.params_mut();
        if store.len() != header.arrays.len() {
            return Err(Error::Integrity(format!(
                "{} arrays stored, model defines {}",
                header.arrays.len(),
                store.len()
            )));
        }
        let mut data = &body[20 + header_len..];
        for (i, entry) in header.arrays.iter().enumerate() {
            let (name, t) = (&store.names()[i], &store.tensors()[i]);
            if *name != entry.name || t.shape() != entry.shape.as_slice() {
                return Err(Error::Integrity(format!(
                    "array {:?} {:?} does not match model parameter {name:?} {:?}",
                    entry.name,
                    entry.shape,
                    t.shape()
                )));
            }
            let n = t.numel();
            if data.len() < 8 * n {
                return Err(truncated());
            }
            let values: Vec<f64> =
                data[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            store.tensors_mut()[i].data_mut().copy_from_slice(&values);
            data = &data[8 * n..];
        }
        if !data.is_empty() {
            return Err(Error::Integrity(format!("{} unexpected trailing bytes", data.len())));
        }
        Ok(Self { model, train: header.train, best_val: header.best_val })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
