//! `sckpt/1` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "sckpt/1\0"
//! hdr_len    u64
//! header     hdr_len bytes of UTF-8 JSON
//! count      u32
//! count × {
//!   name_len u32, name (UTF-8),
//!   ndim u32, dims u64 × ndim,
//!   data f64 × Π dims
//! }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SCKPT_MAGIC: [u8; 8] = *b"sckpt/1\0";

const FORMAT: &str = "sckpt/1";
/// Refuse absurd allocations from corrupt length fields.
const MAX_ELEMS: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub blobs: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn blob(&self, name: &str) -> Option<&Tensor> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Blobs whose name starts with `prefix`, prefix stripped, in file order.
    pub fn group(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.blobs
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let header = serde_json::to_vec(&self.header).map_err(std::io::Error::other)?;
        w.write_all(&SCKPT_MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.blobs.len() as u32).to_le_bytes())?;
        for (name, t) in &self.blobs {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if magic != SCKPT_MAGIC {
            return Err(Error::format(FORMAT, "bad magic"));
        }
        let hdr_len = read_u64(&mut r)?;
        if hdr_len > MAX_ELEMS {
            return Err(Error::format(FORMAT, "header length out of range"));
        }
        let mut header = vec![0u8; hdr_len as usize];
        read_exact(&mut r, &mut header)?;
        let header = serde_json::from_slice(&header).map_err(|e| Error::format(FORMAT, format!("header: {e}")))?;
        let count = read_u32(&mut r)?;
        let mut blobs = Vec::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::format(FORMAT, "blob name is not UTF-8"))?;
            let ndim = read_u32(&mut r)?;
            if ndim > 8 {
                return Err(Error::format(FORMAT, format!("blob {name} has {ndim} dims")));
            }
            let mut shape = Vec::new();
            let mut elems: u64 = 1;
            for _ in 0..ndim {
                let d = read_u64(&mut r)?;
                elems = elems.saturating_mul(d);
                shape.push(d as usize);
            }
            if elems > MAX_ELEMS {
                return Err(Error::format(FORMAT, format!("blob {name} too large")));
            }
            let mut data = Vec::with_capacity(elems as usize);
            let mut buf = [0u8; 8];
            for _ in 0..elems {
                read_exact(&mut r, &mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            blobs.push((name, Tensor::new(shape, data)?));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::format(FORMAT, e.to_string()))? != 0 {
            return Err(Error::format(FORMAT, "trailing bytes after last blob"));
        }
        Ok(Self { header, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(FORMAT, "unexpected end of file"))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
