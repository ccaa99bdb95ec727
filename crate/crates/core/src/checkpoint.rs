//! Checkpoint files.
//!
//! Layout, little-endian:
//! `"SFHD"`, `u32` version, `u32` config length + config JSON, `u64`
//! training step, `u32` tensor count, then per tensor `u16` name length +
//! UTF-8 name, `u8` dtype code, `u8` rank, `rank × u32` dims and the
//! payload. A trailing `u32` CRC-32 covers every preceding byte.

use std::path::Path;

use crate::config::Config;
use crate::model::Model;
use crate::numerics::{DType, ParamStore, Real, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SFHD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub enum StoredParams {
    F32(ParamStore<f32>),
    F64(ParamStore<f64>),
}

impl StoredParams {
    pub fn dtype(&self) -> DType {
        match self {
            StoredParams::F32(_) => DType::F32,
            StoredParams::F64(_) => DType::F64,
        }
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        match self {
            StoredParams::F32(p) => p.cast(),
            StoredParams::F64(p) => p.cast(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Config,
    pub step: u64,
    pub params: StoredParams,
}

impl Checkpoint {
    pub fn model<T: Real>(&self) -> Result<Model<T>> {
        Model::from_params(self.config.clone(), self.params.cast())
    }

    /// Model under a run config that may change switches (modalities,
    /// memory mode) but not tensor shapes.
    pub fn model_with<T: Real>(&self, cfg: Config) -> Result<Model<T>> {
        if !cfg.same_architecture(&self.config) {
            return Err(Error::Checkpoint("config does not match the checkpoint's tensor shapes".into()));
        }
        Model::from_params(cfg, self.params.cast())
    }
}

pub fn encode<T: Real>(cfg: &Config, params: &ParamStore<T>, step: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.total_elements() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(cfg).expect("config serialises");
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save<T: Real>(path: &Path, cfg: &Config, params: &ParamStore<T>, step: u64) -> Result<()> {
    std::fs::write(path, encode(cfg, params, step)).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_tensor<T: Real>(c: &mut Cursor<'_>, shape: Vec<usize>) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let w = T::DTYPE.size();
    let raw = c.take(n.checked_mul(w).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
    let data = raw.chunks_exact(w).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version} (this build reads version {VERSION})")));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let expected = u32::from_le_bytes(tail.try_into().unwrap());
    let found = crc32fast::hash(body);
    if expected != found {
        return Err(Error::Checkpoint(format!("checksum mismatch (stored {expected:08x}, computed {found:08x})")));
    }
    let mut c = Cursor { bytes: body, pos: 8 };
    let len = c.u32()? as usize;
    let config: Config = serde_json::from_slice(c.take(len)?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let step = c.u64()?;
    let count = c.u32()?;
    let mut f32s = ParamStore::<f32>::new();
    let mut f64s = ParamStore::<f64>::new();
    let mut dtype = None;
    for _ in 0..count {
        let nlen = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(nlen)?).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?.to_string();
        let code = c.u8()?;
        let dt = DType::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {code}")))?;
        if *dtype.get_or_insert(dt) != dt {
            return Err(Error::Checkpoint("mixed parameter dtypes".into()));
        }
        let rank = c.u8()? as usize;
        let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        match dt {
            DType::F32 => f32s.insert(name, read_tensor(&mut c, shape)?),
            DType::F64 => f64s.insert(name, read_tensor(&mut c, shape)?),
        }
    }
    if c.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} unexpected trailing bytes", body.len() - c.pos)));
    }
    let params = match dtype.unwrap_or(config.precision) {
        DType::F32 => StoredParams::F32(f32s),
        DType::F64 => StoredParams::F64(f64s),
    };
    Ok(Checkpoint { config, step, params })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Re-encodes a decoded checkpoint.
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    match &ck.params {
        StoredParams::F32(p) => encode(&ck.config, p, ck.step),
        StoredParams::F64(p) => encode(&ck.config, p, ck.step),
    }
}
