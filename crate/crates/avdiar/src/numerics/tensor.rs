//! Dense row-major tensors.

use super::scalar::Scalar;
use super::NumericsError;

/// Dense tensor with row-major layout.
///
/// The data length always equals the product of the shape. Most of the crate
/// works with rank-2 tensors `[rows x cols]`; scalars are `[1 x 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self, NumericsError> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(NumericsError::LengthMismatch {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Rank-2 tensor from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(NumericsError::LengthMismatch {
                    len: row.len(),
                    shape: vec![rows.len(), cols],
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::from_vec(&[rows.len(), cols], data)
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Number of rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: S) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    /// The single value of a `[1 x 1]` tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_rank2(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossless-enough conversion for serialization and reporting.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.real()).collect()
    }

    pub fn map<F: Fn(S) -> S>(&self, f: F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}
