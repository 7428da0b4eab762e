//! Dense row-major f64 tensors and their on-disk format: raw little-endian
//! values in `<name>.f64` plus a JSON shape descriptor in `<name>.json`.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {:?} holds {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Size of the last dimension; rank-0 tensors are rejected at construction.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    /// Number of rows when viewed as `[rows, last_dim]`.
    pub fn leading(&self) -> usize {
        if self.shape.is_empty() {
            0
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[flat_index(&self.shape, idx)]
    }

    /// Copy of rows `[start, start+len)` when viewed as `[rows, last_dim]`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let cols = self.last_dim();
        let rows = self.leading();
        if start + len > rows {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {}..{} out of {}", start, start + len, rows),
            ));
        }
        let data = self.data[start * cols..(start + len) * cols].to_vec();
        Tensor::new(vec![len, cols], data)
    }
}

pub fn flat_index(shape: &[usize], idx: &[usize]) -> usize {
    assert_eq!(shape.len(), idx.len(), "index rank mismatch");
    let mut flat = 0;
    for (d, &i) in idx.iter().enumerate() {
        assert!(i < shape[d], "index {} out of bound {} in dim {}", i, shape[d], d);
        flat = flat * shape[d] + i;
    }
    flat
}

#[derive(Serialize, Deserialize)]
struct ShapeDescriptor {
    shape: Vec<usize>,
}

/// Writes `<dir>/<name>.f64` and `<dir>/<name>.json`.
pub fn save(dir: &Path, name: &str, t: &Tensor) -> Result<()> {
    let mut raw = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(dir.join(format!("{name}.f64")))?.write_all(&raw)?;
    let desc = ShapeDescriptor {
        shape: t.shape().to_vec(),
    };
    fs::write(
        dir.join(format!("{name}.json")),
        serde_json::to_string(&desc)?,
    )?;
    Ok(())
}

/// Reads a tensor written by [`save`], validating byte length against the shape.
pub fn load(dir: &Path, name: &str) -> Result<Tensor> {
    let desc: ShapeDescriptor =
        serde_json::from_str(&fs::read_to_string(dir.join(format!("{name}.json")))?)?;
    let mut raw = Vec::new();
    fs::File::open(dir.join(format!("{name}.f64")))?.read_to_end(&mut raw)?;
    let numel: usize = desc.shape.iter().product();
    if raw.len() != numel * 8 {
        return Err(Error::Checkpoint(format!(
            "{name}: expected {} bytes for shape {:?}, found {}",
            numel * 8,
            desc.shape,
            raw.len()
        )));
    }
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(desc.shape, data)
}
