use super::{DenseTensor, SymMatrix};
use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor `L` with `L L^T = M`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    dim: usize,
    lower: Vec<f64>,
}

impl CholeskyFactor {
    /// Factors `m`. Fails on the first non-positive pivot rather than
    /// patching it; regularization belongs to the caller.
    pub fn new(m: &SymMatrix) -> Result<Self> {
        let d = m.dim();
        let a = m.as_slice();
        let mut l = vec![0.0; d * d];
        for j in 0..d {
            let mut diag = a[j * d + j];
            for k in 0..j {
                diag -= l[j * d + k] * l[j * d + k];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j, value: diag });
            }
            let ljj = diag.sqrt();
            l[j * d + j] = ljj;
            for i in (j + 1)..d {
                let mut s = a[i * d + j];
                for k in 0..j {
                    s -= l[i * d + k] * l[j * d + k];
                }
                l[i * d + j] = s / ljj;
            }
        }
        Ok(Self { dim: d, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    /// `log det M = 2 sum_i log L_ii`.
    pub fn logdet(&self) -> f64 {
        2.0 * (0..self.dim).map(|i| self.lower[i * self.dim + i].ln()).sum::<f64>()
    }

    /// Solves `M X = B` in place for a row-major `dim x cols` right-hand side.
    pub fn solve_into(&self, b: &mut [f64], cols: usize) {
        let d = self.dim;
        assert_eq!(b.len(), d * cols, "right-hand side has wrong length");
        let l = &self.lower;
        // L Z = B
        for i in 0..d {
            for k in 0..i {
                let lik = l[i * d + k];
                if lik != 0.0 {
                    for c in 0..cols {
                        b[i * cols + c] -= lik * b[k * cols + c];
                    }
                }
            }
            let inv = 1.0 / l[i * d + i];
            for c in 0..cols {
                b[i * cols + c] *= inv;
            }
        }
        // L^T X = Z
        for i in (0..d).rev() {
            for k in (i + 1)..d {
                let lki = l[k * d + i];
                if lki != 0.0 {
                    for c in 0..cols {
                        b[i * cols + c] -= lki * b[k * cols + c];
                    }
                }
            }
            let inv = 1.0 / l[i * d + i];
            for c in 0..cols {
                b[i * cols + c] *= inv;
            }
        }
    }

    /// `M^{-1}`, assembled column by column from triangular solves against
    /// the identity.
    pub fn inverse(&self) -> SymMatrix {
        let d = self.dim;
        let mut x = SymMatrix::identity(d).into_vec();
        self.solve_into(&mut x, d);
        SymMatrix::from_rows(d, x).expect("inverse of a valid factor is finite")
    }

    /// `L L^T`.
    pub fn reconstruct(&self) -> SymMatrix {
        let d = self.dim;
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..=i.min(j) {
                    s += self.lower[i * d + k] * self.lower[j * d + k];
                }
                out[i * d + j] = s;
            }
        }
        SymMatrix::from_rows(d, out).expect("finite factor")
    }
}

pub fn cholesky(m: &SymMatrix) -> Result<CholeskyFactor> {
    CholeskyFactor::new(m)
}

pub fn logdet(f: &CholeskyFactor) -> f64 {
    f.logdet()
}

/// Solves `M X = B` for `B` of shape `[d]` or `[d, k]`.
pub fn solve_spd(f: &CholeskyFactor, b: &DenseTensor) -> Result<DenseTensor> {
    let (rows, cols) = b.matrix_dims()?;
    if rows != f.dim() {
        return Err(Error::shape(&[f.dim(), cols], b.shape()));
    }
    let mut x = b.data().to_vec();
    f.solve_into(&mut x, cols);
    DenseTensor::new(b.shape().to_vec(), x)
}

/// `C = A B` for row-major `A: m x k`, `B: k x n`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let out = &mut c[i * n..(i + 1) * n];
            for (o, &bv) in out.iter_mut().zip(row) {
                *o += aip * bv;
            }
        }
    }
    c
}

/// `C = A B^T` for row-major `A: m x k`, `B: n x k`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            c[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `C = A^T B` for row-major `A: k x m`, `B: k x n`.
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let out = &mut c[i * n..(i + 1) * n];
            for (o, &bv) in out.iter_mut().zip(row) {
                *o += api * bv;
            }
        }
    }
    c
}
