//! Binary checkpoint format. Layout (all integers little-endian):
//! magic "RVIS", u32 version, u32 config-JSON length + bytes, u32 parameter
//! count, then per parameter: u32 name length + UTF-8 name, u32 rank,
//! u64 dims, f64 values. Saving the result of a load is byte-identical.

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RVIS";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    let params = model.named_parameters();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in &params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let shape = tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &dim in shape {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in tensor.value() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, save_checkpoint_bytes(model)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: wanted {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            magic, CHECKPOINT_MAGIC
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let config_len = r.u32()? as usize;
    let config_bytes = r.take(config_len)?;
    let config: ModelConfig = serde_json::from_slice(config_bytes)
        .map_err(|e| Error::Checkpoint(format!("invalid config block: {e}")))?;
    let model = Model::new(config, &mut Rng::new(0))?;
    let mut by_name: BTreeMap<String, crate::tensor::Tensor> =
        model.named_parameters().into_iter().collect();

    let count = r.u32()? as usize;
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("parameter name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        let tensor = by_name.remove(&name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint has parameter {name:?} the config does not"))
        })?;
        if tensor.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {name:?} has stored shape {:?} but the config implies {:?}",
                shape,
                tensor.shape()
            )));
        }
        tensor.set_data(&data);
    }
    if !by_name.is_empty() {
        let missing: Vec<&String> = by_name.keys().collect();
        return Err(Error::Checkpoint(format!("checkpoint is missing parameters {missing:?}")));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last parameter",
            bytes.len() - r.pos
        )));
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint_bytes(&bytes)
}
