//! Tensor files: one JSON header line, then the row-major little-endian f32 payload.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DTYPE: &str = "f32-le";
pub const ORDER: &str = "row-major";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub order: String,
    pub schedule_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub header: TensorHeader,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>, schedule_hash: &str, seed: u64) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape { expected: shape, got: vec![data.len()] });
        }
        Ok(Self {
            header: TensorHeader {
                shape,
                dtype: DTYPE.into(),
                order: ORDER.into(),
                schedule_hash: schedule_hash.into(),
                seed,
            },
            data,
        })
    }

    /// Narrows to f32.
    pub fn from_array(a: &ArrayD<f64>, schedule_hash: &str, seed: u64) -> Result<Self> {
        let data = a.as_standard_layout().iter().map(|&v| v as f32).collect();
        Self::new(a.shape().to_vec(), data, schedule_hash, seed)
    }

    pub fn from_matrix(a: &Array2<f64>, schedule_hash: &str, seed: u64) -> Result<Self> {
        Self::from_array(&a.clone().into_dyn(), schedule_hash, seed)
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&self.header.shape), self.data.iter().map(|&v| v as f64).collect())
            .expect("shape checked at construction")
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        if self.header.shape.len() != 2 {
            return Err(Error::Format(format!("expected a 2-d tensor, got shape {:?}", self.header.shape)));
        }
        Ok(self.to_array().into_dimensionality().expect("rank checked"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header).expect("header serialises");
        out.push(b'\n');
        out.reserve(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("missing header line".into()))?;
        let header: TensorHeader =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Format(format!("bad header: {e}")))?;
        if header.dtype != DTYPE || header.order != ORDER {
            return Err(Error::Format(format!("unsupported layout {} {}", header.dtype, header.order)));
        }
        let payload = &bytes[nl + 1..];
        let n: usize = header.shape.iter().product();
        if payload.len() != n * 4 {
            return Err(Error::Format(format!("payload has {} bytes, shape needs {}", payload.len(), n * 4)));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        Ok(Self { header, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
