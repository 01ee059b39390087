//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "DDGCKPT\0"
//! version  u32      1
//! count    u32
//! count × { name_len u32, name utf-8, rows u32, cols u32, rows·cols f64 }
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamSet};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DDGCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_params(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_scalars() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, m) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Sequential little-endian reader that reports the failing byte offset.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    pub(crate) fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
        let start = self.pos;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| self.fail(format!("{what}: size overflow")))?;
        let raw = self.take(n, what)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Matrix::from_vec(rows, cols, data).map_err(|e| Error::Format {
            path: self.path.to_path_buf(),
            offset: start as u64,
            msg: format!("{what}: {e}"),
        })
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn decode_params(bytes: &[u8], path: &Path) -> Result<ParamSet> {
    let mut r = ByteReader::new(bytes, path);
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: "bad checkpoint magic".into(),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 8,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = r.u32("parameter count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.fail("parameter name is not utf-8"))?
            .to_string();
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let m = r.matrix(rows, cols, &name)?;
        if params.find(&name).is_some() {
            return Err(r.fail(format!("duplicate parameter {name}")));
        }
        params.add(name, m);
    }
    r.finish()?;
    Ok(params)
}

pub fn save_params(params: &ParamSet, path: &Path) -> Result<()> {
    fs::write(path, encode_params(params)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes, path)
}
