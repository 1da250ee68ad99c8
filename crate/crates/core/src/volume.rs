//! Dense 3-D scalar volumes and the `svol/1` binary format.
//!
//! Voxels are stored row-major with `x` slowest: voxel `(x, y, z)` lives at
//! `(x * Y + y) * Z + z`. Voxel `(i, j, k)` covers the continuous box
//! `[i, i+1) × [j, j+1) × [k, k+1)`, so its center is `(i+½, j+½, k+½)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Label value reserved for background.
pub const BACKGROUND: u16 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    intensities: Vec<f64>,
    labels: Option<Vec<u16>>,
}

impl Volume {
    pub fn new(dims: [usize; 3], intensities: Vec<f64>, labels: Option<Vec<u16>>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                shape: dims.to_vec(),
                reason: "volume dims must be ≥ 1".into(),
            });
        }
        let n = dims.iter().product::<usize>();
        if intensities.len() != n {
            return Err(Error::InvalidShape {
                shape: dims.to_vec(),
                reason: format!("expects {n} intensities, got {}", intensities.len()),
            });
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::InvalidShape {
                    shape: dims.to_vec(),
                    reason: format!("expects {n} labels, got {}", l.len()),
                });
            }
        }
        Ok(Self {
            dims,
            intensities,
            labels,
        })
    }

    pub fn constant(dims: [usize; 3], value: f64) -> Self {
        let n = dims.iter().product();
        Self::new(dims, vec![value; n], None).expect("valid dims")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.intensities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensities.is_empty()
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn intensities_mut(&mut self) -> &mut [f64] {
        &mut self.intensities
    }

    pub fn labels(&self) -> Option<&[u16]> {
        self.labels.as_deref()
    }

    pub fn with_labels(mut self, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::InvalidShape {
                shape: self.dims.to_vec(),
                reason: format!("expects {} labels, got {}", self.len(), labels.len()),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let z = idx % self.dims[2];
        let y = (idx / self.dims[2]) % self.dims[1];
        let x = idx / (self.dims[1] * self.dims[2]);
        [x, y, z]
    }

    pub fn intensity(&self, x: usize, y: usize, z: usize) -> f64 {
        self.intensities[self.index(x, y, z)]
    }

    pub fn label(&self, x: usize, y: usize, z: usize) -> Option<u16> {
        let idx = self.index(x, y, z);
        self.labels.as_ref().map(|l| l[idx])
    }

    /// Geometric center of the volume in continuous coordinates.
    pub fn center(&self) -> Point {
        self.dims.map(|d| d as f64 / 2.0)
    }

    /// Write intensities to `path` and, when present, labels to the sibling
    /// `.lbl` file.
    pub fn write_svol(&self, path: &Path) -> Result<()> {
        let data: Vec<u8> = self
            .intensities
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        write_svol_file(path, self.dims, DType::F32, &data)?;
        if let Some(labels) = &self.labels {
            let data: Vec<u8> = labels.iter().flat_map(|v| v.to_le_bytes()).collect();
            write_svol_file(&label_path(path), self.dims, DType::U16, &data)?;
        }
        Ok(())
    }

    /// Read an `svol/1` intensity file and its `.lbl` sibling if it exists.
    pub fn read_svol(path: &Path) -> Result<Self> {
        let (dims, dtype, payload) = read_svol_file(path)?;
        if dtype != DType::F32 {
            return Err(Error::format("svol/1", "intensity file must use dtype 0 (f32)"));
        }
        let intensities = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let lbl = label_path(path);
        let labels = if lbl.exists() {
            let (ldims, ldtype, payload) = read_svol_file(&lbl)?;
            if ldims != dims || ldtype != DType::U16 {
                return Err(Error::format("svol/1", "label file dims or dtype disagree with intensities"));
            }
            Some(payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
        } else {
            None
        };
        Volume::new(dims, intensities, labels)
    }
}

/// Magic and version occupying the first 16 bytes of every `svol/1` file.
pub const SVOL_MAGIC: [u8; 16] = *b"svol/1\0\0\0\0\0\0\0\0\0\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    U16 = 1,
}

pub fn label_path(path: &Path) -> PathBuf {
    path.with_extension("lbl")
}

fn write_svol_file(path: &Path, dims: [usize; 3], dtype: DType, payload: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(29);
    header.extend_from_slice(&SVOL_MAGIC);
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::format("svol/1", "dimension exceeds u32"))?;
        header.extend_from_slice(&d.to_le_bytes());
    }
    header.push(dtype as u8);
    w.write_all(&header)
        .and_then(|_| w.write_all(payload))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn read_svol_file(path: &Path) -> Result<([usize; 3], DType, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 29 || bytes[..16] != SVOL_MAGIC {
        return Err(Error::format("svol/1", format!("{}: bad magic", path.display())));
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[16 + 4 * k..20 + 4 * k].try_into().unwrap()) as usize;
    let dims = [dim(0), dim(1), dim(2)];
    let dtype = match bytes[28] {
        0 => DType::F32,
        1 => DType::U16,
        t => return Err(Error::format("svol/1", format!("unknown dtype tag {t}"))),
    };
    let width = if dtype == DType::F32 { 4 } else { 2 };
    let expected = dims.iter().product::<usize>() * width;
    let payload = bytes.split_off(29);
    if payload.len() != expected {
        return Err(Error::format(
            "svol/1",
            format!("{}: payload is {} bytes, expected {expected}", path.display(), payload.len()),
        ));
    }
    Ok((dims, dtype, payload))
}
