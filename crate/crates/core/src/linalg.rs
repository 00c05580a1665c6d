//! Dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Row-major matrix payload used by the on-disk formats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMajor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for RowMajor {
    fn from(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            data.extend(m.row(i).iter().copied());
        }
        RowMajor {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl RowMajor {
    pub fn to_matrix(&self) -> Option<DMatrix<f64>> {
        (self.rows * self.cols == self.data.len())
            .then(|| DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

/// Rows of `m` selected by `idx`, in the given order.
pub fn select_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

pub fn select_entries(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]])
}

/// Smallest singular value; `+inf` for an empty matrix.
pub fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return f64::INFINITY;
    }
    if m.nrows() > m.ncols() {
        return 0.0;
    }
    m.clone()
        .singular_values()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}
