//! Dense row-major `f64` tensors and the `CFAT` binary file format.
//!
//! Layout of a `.cfat` file:
//!
//! ```text
//! "CFAT" | 0x01 (version) | 0x02 (f64) | ndim: u32 LE | ndim x u64 LE dims | f64 LE payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CFAT";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F64: u8 = 0x02;

/// Dense tensor. Every constructor checks that the shape matches the payload
/// length and that all values are finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, expected, data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor constructor (index {i})")));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for kernel outputs that have already been checked.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    /// Interprets the tensor as a matrix: `[m, n]` as is, `[n]` as a row,
    /// higher ranks flatten every trailing axis into the columns.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1..].iter().product()),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Row `i` of the matrix view.
    pub fn row(&self, i: usize) -> &[f64] {
        let (_, n) = self.dims2();
        &self.data[i * n..(i + 1) * n]
    }

    /// Gathers rows of the matrix view into a new `[rows.len(), n]` tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let (_, n) = self.dims2();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor::from_parts(vec![rows.len(), n], data)
    }

    /// In-place update used by optimizers. The closure must keep values finite.
    pub fn update<F: FnMut(&mut [f64])>(&mut self, f: F) -> Result<()> {
        let mut f = f;
        f(&mut self.data);
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("in-place tensor update".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 8 * self.shape.len() + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(DTYPE_F64);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes a `CFAT` buffer. `origin` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |detail: &str| Error::format(origin, detail.to_string());
        if bytes.len() < 10 {
            return Err(bad("truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic bytes (expected CFAT)"));
        }
        if bytes[4] != VERSION {
            return Err(bad(&format!("unsupported version {:#04x}", bytes[4])));
        }
        if bytes[5] != DTYPE_F64 {
            return Err(bad(&format!("unsupported dtype {:#04x}", bytes[5])));
        }
        let ndim = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let dims_end = 10 + 8 * ndim;
        if bytes.len() < dims_end {
            return Err(bad("truncated dimension list"));
        }
        let shape: Vec<usize> = bytes[10..dims_end]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let count: usize = shape.iter().product();
        let payload = &bytes[dims_end..];
        if payload.len() != count * 8 {
            return Err(bad(&format!(
                "payload has {} bytes, shape {:?} needs {}",
                payload.len(),
                shape,
                count * 8
            )));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::from_bytes(&bytes, path)
    }
}
