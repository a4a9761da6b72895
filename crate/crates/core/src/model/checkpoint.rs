//! Binary checkpoint: `RSLM`, u32 version, u32 tensor count, then per tensor
//! u16 name length, name, u8 dtype, u8 rank, u64 dims, little-endian data;
//! finally a u32-length-prefixed JSON config record.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::params::{LoraConfig, ModelConfig, ModelParams};
use super::scalar::Scalar;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RSLM";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigRecord {
    model: ModelConfig,
    lora: Option<LoraConfig>,
}

pub fn save<T: Scalar, W: Write>(params: &ModelParams<T>, mut w: W) -> Result<()> {
    let entries = params.entries();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, _, t) in &entries {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(T::DTYPE);
        buf.push(t.shape.len() as u8);
        for &dim in &t.shape {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &x in &t.data {
            x.write_le(&mut buf);
        }
    }
    let record = serde_json::to_vec(&ConfigRecord {
        model: params.config.clone(),
        lora: params.lora,
    })?;
    buf.extend_from_slice(&(record.len() as u32).to_le_bytes());
    buf.extend_from_slice(&record);
    w.write_all(&buf)?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut b = vec![0; n];
        self.inner.read_exact(&mut b).map_err(|_| bad("truncated file"))?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load<T: Scalar, R: Read>(r: R) -> Result<ModelParams<T>> {
    let mut r = Reader { inner: r };
    if r.bytes(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors: HashMap<String, (Vec<usize>, Vec<u8>)> = HashMap::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.bytes(len)?).map_err(|_| bad("tensor name is not UTF-8"))?;
        let dtype = r.u8()?;
        if dtype != T::DTYPE {
            return Err(bad(format!("{name}: dtype {dtype}, expected {}", T::DTYPE)));
        }
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let data = r.bytes(numel * T::BYTES)?;
        if tensors.insert(name.clone(), (dims, data)).is_some() {
            return Err(bad(format!("duplicate tensor {name}")));
        }
    }
    let len = r.u32()? as usize;
    let record: ConfigRecord = serde_json::from_slice(&r.bytes(len)?)?;
    record.model.validate()?;

    let mut params = ModelParams::<T>::zeros(&record.model, record.lora);
    for (name, _, t) in params.entries_mut() {
        let (dims, data) = tensors.remove(&name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if dims != t.shape {
            return Err(bad(format!("{name}: shape {dims:?}, expected {:?}", t.shape)));
        }
        for (x, chunk) in t.data.iter_mut().zip(data.chunks_exact(T::BYTES)) {
            *x = T::read_le(chunk);
        }
    }
    if let Some(name) = tensors.keys().min() {
        return Err(bad(format!("unexpected tensor {name}")));
    }
    Ok(params)
}

pub fn save_file<T: Scalar>(params: &ModelParams<T>, path: &std::path::Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    save(params, std::io::BufWriter::new(file))
}

pub fn load_file<T: Scalar>(path: &std::path::Path) -> Result<ModelParams<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    load(std::io::BufReader::new(file))
}
