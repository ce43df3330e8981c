//! Single-file checkpoint archive: magic, a JSON header, then little-endian `f64` payloads.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::unet::{ModelParameters, ParamEntry, UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"LDROPCK1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: UNetConfig,
    epoch: usize,
    val_dice: f64,
    scalar: String,
    entries: Vec<ParamEntry>,
    num_values: usize,
    num_running: usize,
}

/// A saved model with the epoch and validation Dice it was selected at.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub config: UNetConfig,
    pub params: ModelParameters<T>,
    pub epoch: usize,
    pub val_dice: f64,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn into_model(self) -> Result<UNet<T>> {
        UNet::with_parameters(self.config, self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            val_dice: self.val_dice,
            scalar: std::any::type_name::<T>().to_string(),
            entries: self.params.entries.clone(),
            num_values: self.params.values.len(),
            num_running: self.params.running.len(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * (header.num_values + header.num_running));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.params.values.iter().chain(&self.params.running) {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Serde(format!("checkpoint: {m}"));
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| bad("truncated"))?;
        let len = u64::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        let total = header.num_values + header.num_running;
        if r.len() != total * 8 {
            return Err(bad("payload length mismatch"));
        }
        let mut all = r.chunks_exact(8).map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())));
        let values: Vec<T> = all.by_ref().take(header.num_values).collect();
        let running: Vec<T> = all.collect();
        Ok(Self {
            config: header.config,
            params: ModelParameters { values, running, entries: header.entries },
            epoch: header.epoch,
            val_dice: header.val_dice,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::unet::init_model;

    #[test]
    fn archive_roundtrip_is_lossless() {
        let cfg = UNetConfig { depth: 1, base_channels: 2, out_channels: 3, image_size: 8, ..Default::default() };
        let params = init_model::<f32>(&cfg).unwrap();
        let ck = Checkpoint { config: cfg, params, epoch: 7, val_dice: 0.5 };
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.params, ck.params);
        assert_eq!(back.epoch, 7);
        assert!(back.into_model().is_ok());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::<f32>::from_bytes(b"nope").is_err());
        assert!(Checkpoint::<f32>::from_bytes(b"LDROPCK1\x05\0\0\0\0\0\0\0{}").is_err());
    }
}
