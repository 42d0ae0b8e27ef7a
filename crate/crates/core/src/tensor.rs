//! Dense row-major tensors and the `TNSR` v1 binary container.
//!
//! Layout of a v1 file: the magic bytes `TNSR`, a version byte `0x01`, a
//! dtype byte (`0x00` f32, `0x01` f64), the rank as a little-endian `u32`,
//! `rank` extents as little-endian `u64`, then the row-major payload.
//! Values are always held as `f64` in memory; f32 payloads are widened on
//! read.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u8 = 0x01;

/// On-disk element type.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0x00,
            DType::F64 => 0x01,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0x00 => Some(DType::F32),
            0x01 => Some(DType::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::shape(format!("extents must be positive, got {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "extents {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Tensor::filled(dims, 0.0)
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        assert!(!dims.is_empty() && dims.iter().all(|&d| d > 0), "extents must be positive");
        let n = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![value; n] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Builds a matrix from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Tensor::matrix(rows.len(), cols, rows.concat())
    }

    /// A `1 × n` row vector.
    pub fn row_vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Tensor::matrix(1, n, values)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { dims: vec![1, 1], data: vec![value] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Row count when viewed as a matrix: the leading extent.
    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Column count when viewed as a matrix: the product of trailing extents.
    pub fn cols(&self) -> usize {
        self.dims[1..].iter().product()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() || dims.contains(&0) {
            return Err(Error::shape(format!("cannot reshape {:?} into {dims:?}", self.dims)));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Serializes into the v1 container.
    pub fn to_bytes(&self, dtype: DType) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(10 + 8 * self.dims.len() + dtype.width() * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(dtype.code());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match dtype {
            DType::F32 => {
                for &v in &self.data {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &v in &self.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Parses a v1 container; `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::format(origin, msg);
        if bytes.len() < 10 || &bytes[..4] != MAGIC {
            return Err(bad("missing TNSR magic"));
        }
        if bytes[4] != VERSION {
            return Err(bad(&format!("unsupported version {}", bytes[4])));
        }
        let dtype = DType::from_code(bytes[5]).ok_or_else(|| bad("unknown dtype byte"))?;
        let rank = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let header = 10 + 8 * rank;
        if bytes.len() < header {
            return Err(bad("truncated extents"));
        }
        let dims: Vec<usize> = bytes[10..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let count: usize = dims.iter().product();
        let payload = &bytes[header..];
        if payload.len() != count * dtype.width() {
            return Err(bad(&format!(
                "payload holds {} bytes, extents {dims:?} need {}",
                payload.len(),
                count * dtype.width()
            )));
        }
        let data = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Tensor::new(dims, data).map_err(|e| bad(&e.to_string()))
    }

    pub fn write(&self, path: &Path, dtype: DType) -> Result<()> {
        fs::write(path, self.to_bytes(dtype)).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_inconsistent_extents() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let bytes = t.to_bytes(DType::F64);
        assert_eq!(&bytes[..4], b"TNSR");
        assert_eq!(bytes[4], 0x01);
        assert_eq!(bytes[5], 0x01);
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        assert_eq!(&bytes[10..18], &2u64.to_le_bytes());
        assert_eq!(&bytes[18..26], &1u64.to_le_bytes());
        assert_eq!(&bytes[26..34], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 42);
    }

    #[test]
    fn f32_payload_is_widened() {
        let t = Tensor::new(vec![3], vec![0.5, 1.25, -3.0]).unwrap();
        let bytes = t.to_bytes(DType::F32);
        assert_eq!(bytes[5], 0x00);
        let back = Tensor::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        let mut bytes = t.to_bytes(DType::F64);
        bytes.pop();
        assert!(matches!(
            Tensor::from_bytes(&bytes, Path::new("mem")),
            Err(Error::Format { .. })
        ));
        bytes[0] = b'X';
        assert!(Tensor::from_bytes(&bytes, Path::new("mem")).is_err());
    }

    proptest! {
        #[test]
        fn f64_container_round_trips(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((seed as f64) * 1e-3 + i as f64).sin()).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = Tensor::from_bytes(&t.to_bytes(DType::F64), Path::new("mem")).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
