use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// A batch of points in sample space, labelled with the timestep they live at.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBatch {
    pub data: Array2<f64>,
    pub t: usize,
}

impl StateBatch {
    pub fn new(data: Array2<f64>, t: usize) -> Result<Self> {
        if data.ncols() == 0 {
            return Err(Error::param("sample dimension must be at least 1"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite entry in state at t = {t}")));
        }
        Ok(Self { data, t })
    }

    /// Builds a batch from row vectors.
    pub fn from_rows(rows: &[Vec<f64>], t: usize) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::param("rows have differing lengths"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let data = Array2::from_shape_vec((rows.len(), d), flat)
            .map_err(|e| Error::param(e.to_string()))?;
        Self::new(data, t)
    }

    pub fn batch(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }
}
