//! Binary checkpoint: trained parameters plus everything needed to rebuild
//! the model and its data.
//!
//! Layout (little endian):
//! `"DCTRLCKP"` | version u32 | header length u64 | JSON header |
//! parameters as f64 in header order | SHA-256 of all preceding bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{DeepCtrlModel, InputScaler, ModelArch};
use crate::numerics::{ParamSet, Tensor2D};

pub const MAGIC: &[u8; 8] = b"DCTRLCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamShape {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: String,
    arch: ModelArch,
    scaler: InputScaler,
    params: Vec<ParamShape>,
    rho: f64,
    seed: u64,
    epoch: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// Resolved experiment configuration (TOML) the model was trained with.
    pub config: String,
    pub model: DeepCtrlModel,
    pub rho: f64,
    pub seed: u64,
    /// Epoch whose parameters were kept.
    pub epoch: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let header = Header {
            config: self.config.clone(),
            arch: self.model.arch().clone(),
            scaler: self.model.scaler().clone(),
            params: params
                .iter()
                .map(|(name, t)| ParamShape { name: name.to_string(), rows: t.rows(), cols: t.cols() })
                .collect(),
            rho: self.rho,
            seed: self.seed,
            epoch: self.epoch,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Contract(format!("checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + params.count() * 8 + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Corrupt("missing checkpoint signature".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion { found: version, supported: CHECKPOINT_VERSION });
        }
        if bytes.len() < PREFIX_LEN + DIGEST_LEN {
            return Err(Error::Corrupt("truncated file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Corrupt("checksum mismatch (truncated or modified)".into()));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let payload = body
            .get(PREFIX_LEN..)
            .filter(|p| p.len() >= header_len)
            .ok_or_else(|| Error::Corrupt("header length exceeds file".into()))?;
        let (json, mut raw) = payload.split_at(header_len);
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
        let expected: usize = header.params.iter().map(|p| p.rows * p.cols * 8).sum();
        if raw.len() != expected {
            return Err(Error::Corrupt(format!("expected {expected} parameter bytes, found {}", raw.len())));
        }
        let mut params = ParamSet::new();
        for p in &header.params {
            let n = p.rows * p.cols;
            let (chunk, rest) = raw.split_at(n * 8);
            raw = rest;
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            params.push(p.name.clone(), Tensor2D::new(p.rows, p.cols, data)?);
        }
        let model = DeepCtrlModel::from_parts(header.arch, header.scaler, params)?;
        Ok(Self { config: header.config, model, rho: header.rho, seed: header.seed, epoch: header.epoch })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let arch = ModelArch::tabular_regression(3);
        let model = DeepCtrlModel::new(arch, InputScaler::identity(3), 5).unwrap();
        Checkpoint { config: "task = \"x\"\n".into(), model, rho: 0.25, seed: 5, epoch: 7 }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.model.params(), ck.model.params());
        assert_eq!((back.rho, back.seed, back.epoch), (0.25, 5, 7));
        assert_eq!(back.config, ck.config);
    }

    #[test]
    fn damage_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 10, 30, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 100;
        flipped[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Corrupt(_))));
        let mut future = bytes;
        future[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&future),
            Err(Error::UnsupportedVersion { found: 2, supported: 1 })
        ));
    }
}
