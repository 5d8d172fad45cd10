//! Versioned checkpoint container: a JSON metadata blob plus named f64
//! arrays with shape headers.
//!
//! Byte layout (little-endian integers):
//!   magic "PCLC", u32 version (1),
//!   u32 metadata length, metadata (UTF-8 JSON),
//!   u32 array count, then per array:
//!     u32 name length, name (UTF-8),
//!     u32 ndim, u32 dims...,
//!     f64 values (row-major).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PCLC";
const VERSION: u32 = 1;

#[derive(Debug, Default)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn push_tensor(&mut self, name: &str, t: &Tensor) {
        self.arrays.push((name.to_string(), t.shape(), t.data()));
    }

    pub fn get(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<f64>)> {
        self.arrays.iter().find(|(n, _, _)| n == name)
    }

    /// Copy a stored array into an existing tensor (shapes must match).
    pub fn load_into(&self, name: &str, t: &Tensor) -> Result<()> {
        let (_, shape, data) = self
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing array {name}")))?;
        if *shape != t.shape() {
            return Err(Error::Format(format!(
                "checkpoint array {name} has shape {:?}, expected {:?}",
                shape,
                t.shape()
            )));
        }
        t.set_data(data.clone());
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, shape, data) in &self.arrays {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for d in shape {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta_buf = vec![0u8; meta_len];
        r.read_exact(&mut meta_buf)?;
        let meta = serde_json::from_slice(&meta_buf).map_err(|e| Error::Format(e.to_string()))?;
        let count = read_u32(&mut r)? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf).map_err(|e| Error::Format(e.to_string()))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            arrays.push((name, shape, data));
        }
        Ok(Checkpoint { meta, arrays })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
