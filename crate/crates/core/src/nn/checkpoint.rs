//! Binary checkpoint: a versioned header with the config and its hash,
//! followed by every parameter as `name -> shape -> row-major f64` records.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MIVOLOCK" | u32 version | str config_hash | str config_toml | u32 count
//! count x ( str name | u8 frozen | u32 ndim | ndim x u64 dim | numel x f64 )
//! ```
//! where `str` is a `u32` byte length followed by UTF-8 bytes.

use super::fusion::MiVolo;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

const MAGIC: &[u8; 8] = b"MIVOLOCK";
pub const FORMAT_VERSION: u32 = 1;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

pub fn to_bytes(model: &MiVolo) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + model.store.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_str(&mut out, &model.config.hash());
    put_str(&mut out, &model.config.to_toml_string());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for p in model.store.iter() {
        put_str(&mut out, &p.name);
        out.push(u8::from(p.frozen));
        out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Reads only the header: `(config hash, config)`.
pub fn read_header(bytes: &[u8]) -> Result<(String, ModelConfig)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    header(&mut r)
}

fn header(r: &mut Reader<'_>) -> Result<(String, ModelConfig)> {
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hash = r.str()?.to_string();
    let config = ModelConfig::from_toml_str(r.str()?)?;
    if config.hash() != hash {
        return Err(Error::Checkpoint(format!("config hash mismatch: header {hash}, config {}", config.hash())));
    }
    Ok((hash, config))
}

pub fn from_bytes(bytes: &[u8]) -> Result<MiVolo> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let (_, config) = header(&mut r)?;
    let mut model = MiVolo::new(&config)?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} parameters, config implies {}",
            model.store.len()
        )));
    }
    for _ in 0..count {
        let name = r.str()?.to_string();
        let frozen = r.u8()? != 0;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        model.store.set_value(&name, Tensor::new(shape, data)?)?;
        model.store.get_mut(&name).expect("just set").frozen = frozen;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok(model)
}

pub fn save(model: &MiVolo, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<MiVolo> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::Input(format!("cannot read checkpoint {}: {e}", path.display())))?;
    from_bytes(&bytes)
}
