//! Dense 64-bit matrices used throughout the model.
//!
//! Every value is a 2-d tensor in row-major order; column vectors are
//! `n x 1`, scalars are `1 x 1`.

use thiserror::Error;

/// Errors raised by tensor construction and recorded operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    Domain {
        op: &'static str,
        expected: &'static str,
        got: (usize, usize),
    },
    #[error("shape {rows}x{cols} needs {expected} values, got {got}")]
    ValueCount {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
    #[error("tensor dimensions must be nonzero, got {0}x{1}")]
    ZeroDim(usize, usize),
    #[error("dropout rate {0} outside [0, 1)")]
    DropoutRate(f64),
    #[error("axis {0} invalid for a 2-d tensor")]
    Axis(usize),
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),
}

/// A dense matrix of `f64` values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, TensorError> {
        if rows == 0 || cols == 0 {
            return Err(TensorError::ZeroDim(rows, cols));
        }
        if values.len() != rows * cols {
            return Err(TensorError::ValueCount {
                rows,
                cols,
                expected: rows * cols,
                got: values.len(),
            });
        }
        Ok(Tensor { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows: rows.max(1),
            cols: cols.max(1),
            values: vec![0.0; rows.max(1) * cols.max(1)],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            values: vec![value; rows * cols],
        }
    }

    /// Column vector `n x 1`.
    pub fn column(values: Vec<f64>) -> Result<Self, TensorError> {
        let n = values.len();
        Tensor::new(n, 1, values)
    }

    /// Row vector `1 x n`.
    pub fn row(values: Vec<f64>) -> Result<Self, TensorError> {
        let n = values.len();
        Tensor::new(1, n, values)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            values: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = columns.len();
        if cols == 0 {
            return Err(TensorError::ZeroDim(0, 0));
        }
        let rows = columns[0].len();
        for (j, c) in columns.iter().enumerate() {
            if c.len() != rows {
                return Err(TensorError::Dimension {
                    op: "from_columns",
                    lhs: (rows, 1),
                    rhs: (c.len(), j),
                });
            }
        }
        let mut values = vec![0.0; rows * cols];
        for (j, c) in columns.iter().enumerate() {
            for (i, v) in c.iter().enumerate() {
                values[i * cols + j] = *v;
            }
        }
        Tensor::new(rows, cols, values)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    /// True when the shape is `n x 1` or `1 x n`.
    pub fn is_vector(&self) -> bool {
        self.rows == 1 || self.cols == 1
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
