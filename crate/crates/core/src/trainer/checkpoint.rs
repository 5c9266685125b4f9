use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamGroup, SegModel};
use crate::scalar::Scalar;

use super::config::TrainConfig;

const MAGIC: &[u8; 8] = b"FCSGCKPT";
const VERSION: u32 = 1;

/// Model parameters with the iteration and configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord<T> {
    pub params: SegModel<T>,
    pub iteration: u64,
    pub config: TrainConfig,
    /// Loss history file, relative to the checkpoint's directory.
    pub loss_history: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    iteration: u64,
    config: TrainConfig,
    loss_history: Option<PathBuf>,
    tensors: Vec<TensorEntry>,
}

impl<T: Scalar> CheckpointRecord<T> {
    /// Layout: magic, `u32` version, `u64` header length, JSON header, then
    /// every tensor's elements little-endian in header order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.params.params();
        let header = Header {
            dtype: T::DTYPE.to_string(),
            iteration: self.iteration,
            config: self.config.clone(),
            loss_history: self.loss_history.clone(),
            tensors: params
                .iter()
                .map(|(name, p)| TensorEntry {
                    name: name.clone(),
                    group: ParamGroup::of(name).map(|g| g.prefix()).unwrap_or("?").to_string(),
                    shape: p.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + self.params.param_count() * T::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, p) in &params {
            for &v in p.iter() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        let header: Header = serde_json::from_slice(body.get(..header_len).ok_or_else(|| bad("truncated header"))?)?;
        if header.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("checkpoint holds {} values, expected {}", header.dtype, T::DTYPE)));
        }
        header.config.validate()?;
        let mut params = SegModel::<T>::new(header.config.model.clone(), 0)?;
        let mut data = &body[header_len..];
        {
            let mut slots = params.params_mut();
            if slots.len() != header.tensors.len() {
                return Err(bad("tensor count does not match the model configuration"));
            }
            for ((name, slot), entry) in slots.iter_mut().zip(&header.tensors) {
                if *name != entry.name || slot.shape() != entry.shape.as_slice() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {} {:?} does not match model slot {name} {:?}",
                        entry.name,
                        entry.shape,
                        slot.shape()
                    )));
                }
                let n = slot.len() * T::BYTES;
                let chunk = data.get(..n).ok_or_else(|| bad("truncated tensor data"))?;
                for (v, b) in slot.iter_mut().zip(chunk.chunks_exact(T::BYTES)) {
                    *v = T::read_le(b);
                }
                data = &data[n..];
            }
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self { params, iteration: header.iteration, config: header.config, loss_history: header.loss_history })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
