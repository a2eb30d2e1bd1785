//! Flat binary serialization of a parameter store.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  b"CMLSTORE"
//! version u32      1
//! count   u64      number of records
//! record:
//!   name_len u32, name bytes (UTF-8)
//!   group    u8   0=Base 1=Adapter 2=Head 3=LayerNorm
//!   lang_len u32, lang bytes     (Adapter only)
//!   ndim     u32, dims u64 * ndim
//!   values   f64-LE * prod(dims)
//! ```
//!
//! Records are written in lexicographic name order, so identical stores
//! serialize to identical bytes.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::lang::LangId;

use super::store::{NamedParamStore, ParamGroup};
use super::Tensor;

pub const STORE_MAGIC: &[u8; 8] = b"CMLSTORE";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SerializeError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: not a parameter store file")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("corrupt store file: {0}")]
    Corrupt(String),
}

/// Writes every entry of `store` (in name order) to `w`.
pub fn write_store(store: &NamedParamStore, w: &mut impl Write) -> Result<(), SerializeError> {
    w.write_all(STORE_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (name, tensor, group) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        match group {
            ParamGroup::Base => w.write_all(&[0u8])?,
            ParamGroup::Adapter(lang) => {
                w.write_all(&[1u8])?;
                w.write_all(&(lang.as_str().len() as u32).to_le_bytes())?;
                w.write_all(lang.as_str().as_bytes())?;
            }
            ParamGroup::Head => w.write_all(&[2u8])?,
            ParamGroup::LayerNorm => w.write_all(&[3u8])?,
        }
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a store previously written by [`write_store`]. The version counter
/// of the returned store starts at its post-construction value; only
/// contents round-trip.
pub fn read_store(r: &mut impl Read) -> Result<NamedParamStore, SerializeError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != STORE_MAGIC {
        return Err(SerializeError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(SerializeError::BadVersion(version));
    }
    let count = read_u64(r)?;
    let mut store = NamedParamStore::new();
    for _ in 0..count {
        let name = read_string(r)?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let group = match tag[0] {
            0 => ParamGroup::Base,
            1 => ParamGroup::Adapter(LangId::new(read_string(r)?)),
            2 => ParamGroup::Head,
            3 => ParamGroup::LayerNorm,
            t => return Err(SerializeError::Corrupt(format!("unknown group tag {t}"))),
        };
        let ndim = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        if store.contains(&name) {
            return Err(SerializeError::Corrupt(format!("duplicate name {name:?}")));
        }
        store.register(name, Tensor::from_vec(&shape, data), group);
    }
    Ok(store)
}

fn read_u32(r: &mut impl Read) -> Result<u32, SerializeError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64, SerializeError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_string(r: &mut impl Read) -> Result<String, SerializeError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| SerializeError::Corrupt(format!("bad utf-8: {e}")))
}
