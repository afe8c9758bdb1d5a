//! Dense double-precision arrays and the small linear-algebra kernels the
//! loss is built from.
//!
//! Matrices are row-major. Nothing here forms an explicit inverse; products
//! with an inverse go through [`CholeskyFactor::solve_into`].

mod linalg;
pub mod rmt;

pub use linalg::{cholesky, logdet, matmul, matmul_nt, matmul_tn, solve_spd, CholeskyFactor};

use crate::error::{Error, Result};

/// Row-major dense array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch { expected: shape, actual: vec![data.len()] });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("DenseTensor::new"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            debug_assert!(i < n);
            acc * n + i
        })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(&shape, &self.shape));
        }
        Ok(Self { shape, data: self.data })
    }

    /// Interprets a rank-1 tensor as a column.
    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [r] => Ok((r, 1)),
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(&[0, 0], &self.shape)),
        }
    }
}

/// Symmetric `dim x dim` matrix. Construction symmetrizes as `(A + A^T) / 2`
/// so the stored entries are exactly symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn from_rows(dim: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::shape(&[dim, dim], &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("SymMatrix::from_rows"));
        }
        symmetrize(&mut data, dim);
        Ok(Self { dim, data })
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    pub fn scaled_identity(dim: usize, value: f64) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = value;
        }
        Self { dim, data }
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let dim = values.len();
        let mut data = vec![0.0; dim * dim];
        for (i, &v) in values.iter().enumerate() {
            data[i * dim + i] = v;
        }
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// `self + value * I`.
    pub fn add_diagonal(&self, value: f64) -> Self {
        let mut out = self.clone();
        for i in 0..self.dim {
            out.data[i * self.dim + i] += value;
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn to_tensor(&self) -> DenseTensor {
        DenseTensor { shape: vec![self.dim, self.dim], data: self.data.clone() }
    }
}

/// In-place `(A + A^T) / 2` on a row-major square matrix.
pub fn symmetrize(data: &mut [f64], dim: usize) {
    for i in 0..dim {
        for j in (i + 1)..dim {
            let v = 0.5 * (data[i * dim + j] + data[j * dim + i]);
            data[i * dim + j] = v;
            data[j * dim + i] = v;
        }
    }
}
