//! Independent reference computations: Gaussian entropy and mutual
//! information in closed form, a Gaussian sampler, and brute-force
//! determinant, covariance and eigenvalue routines.
//!
//! None of these share code paths with [`crate::rmi`] beyond the Cholesky
//! kernel used to draw correlated samples.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::region::{PointSource, RegionDistribution};
use crate::rmi::{conditional_cov_with, estimate_stats, full_lower_bound, RmiConfig};
use crate::rng::SplitMix64;
use crate::tensor::{cholesky, SymMatrix};

const LOG_2PI_E: f64 = 2.837_877_066_409_345_3; // ln(2 pi e)

/// Jointly Gaussian `(Y, P)` with `dim` coordinates each. The covariance is
/// `2d x 2d` with blocks `[[Sigma_Y, Sigma_YP], [Sigma_YP^T, Sigma_P]]`.
#[derive(Debug, Clone)]
pub struct GaussianJoint {
    pub dim: usize,
    pub mean: Vec<f64>,
    pub cov: SymMatrix,
}

impl GaussianJoint {
    pub fn new(dim: usize, mean: Vec<f64>, cov: SymMatrix) -> Result<Self> {
        if mean.len() != 2 * dim || cov.dim() != 2 * dim {
            return Err(Error::shape(&[2 * dim], &[mean.len(), cov.dim()]));
        }
        cholesky(&cov)?;
        Ok(Self { dim, mean, cov })
    }

    /// Unit-variance coordinates where `y_i` and `p_i` have correlation
    /// `rho` and distinct indices are independent.
    pub fn per_coordinate(dim: usize, rho: f64) -> Result<Self> {
        let n = 2 * dim;
        let mut cov = vec![0.0; n * n];
        for i in 0..n {
            cov[i * n + i] = 1.0;
        }
        for i in 0..dim {
            cov[i * n + dim + i] = rho;
            cov[(dim + i) * n + i] = rho;
        }
        Self::new(dim, vec![0.0; n], SymMatrix::from_rows(n, cov)?)
    }

    fn block(&self, row0: usize, col0: usize) -> Vec<f64> {
        let (d, n) = (self.dim, 2 * self.dim);
        let c = self.cov.as_slice();
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            out[i * d..(i + 1) * d].copy_from_slice(&c[(row0 + i) * n + col0..(row0 + i) * n + col0 + d]);
        }
        out
    }

    pub fn sigma_y(&self) -> SymMatrix {
        SymMatrix::from_rows(self.dim, self.block(0, 0)).expect("finite block")
    }

    pub fn sigma_p(&self) -> SymMatrix {
        SymMatrix::from_rows(self.dim, self.block(self.dim, self.dim)).expect("finite block")
    }

    /// Row-major `Sigma_YP`.
    pub fn sigma_yp(&self) -> Vec<f64> {
        self.block(0, self.dim)
    }
}

/// `0.5 * ln((2 pi e)^d det(cov))` in nats.
pub fn gaussian_entropy(cov: &SymMatrix) -> Result<f64> {
    let logdet = cholesky(cov)?.logdet();
    Ok(0.5 * (cov.dim() as f64 * LOG_2PI_E + logdet))
}

/// Exact `I(Y; P)` as `H(Y) + H(P) - H(Y, P)`, i.e.
/// `0.5 * (logdet Sigma_Y + logdet Sigma_P - logdet Sigma)`.
pub fn gaussian_mi(joint: &GaussianJoint) -> Result<f64> {
    let hy = cholesky(&joint.sigma_y())?.logdet();
    let hp = cholesky(&joint.sigma_p())?.logdet();
    let hj = cholesky(&joint.cov)?.logdet();
    Ok((0.5 * (hy + hp - hj)).max(0.0))
}

/// `0.5 * (logdet Sigma_Y - logdet(Sigma_Y - Sigma_YP Sigma_P^{-1} Sigma_YP^T))`,
/// the conditional-covariance route to the same quantity.
pub fn gaussian_mi_conditional(joint: &GaussianJoint) -> Result<f64> {
    let d = joint.dim;
    let cyp = joint.sigma_yp();
    let fp = cholesky(&joint.sigma_p())?;
    let mut k = crate::rmi::transpose(&cyp, d, d);
    fp.solve_into(&mut k, d);
    let red = crate::tensor::matmul(&cyp, &k, d, d, d);
    let sy = joint.sigma_y();
    let cond: Vec<f64> = sy.as_slice().iter().zip(&red).map(|(a, b)| a - b).collect();
    let cond = SymMatrix::from_rows(d, cond)?;
    Ok(0.5 * (cholesky(&sy)?.logdet() - cholesky(&cond)?.logdet()))
}

/// `n` i.i.d. draws `mean + L z` with `L L^T = cov` and `z` standard normal,
/// split into the `Y` and `P` halves. Each seed is an independent stream;
/// parallel sampling partitions work by seed.
pub fn sample_joint(joint: &GaussianJoint, n: usize, seed: u64) -> Result<RegionDistribution> {
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let (d, m) = (joint.dim, 2 * joint.dim);
    let l = cholesky(&joint.cov)?;
    let lower = l.lower();
    let mut rng = SplitMix64::new(seed);
    let mut y = vec![0.0; d * n];
    let mut p = vec![0.0; d * n];
    let mut z = vec![0.0; m];
    for j in 0..n {
        for v in z.iter_mut() {
            *v = rng.next_normal();
        }
        for i in 0..m {
            let mut x = joint.mean[i];
            for k in 0..=i {
                x += lower[i * m + k] * z[k];
            }
            if i < d {
                y[i * n + j] = x;
            } else {
                p[(i - d) * n + j] = x;
            }
        }
    }
    RegionDistribution::from_points(d, y, p, PointSource::Synthetic)
}

/// Cofactor expansion along the first row, `d <= 4`.
pub fn brute_force_det(m: &[f64], d: usize) -> Result<f64> {
    if d > 4 {
        return Err(Error::DimTooLarge(d));
    }
    if m.len() != d * d {
        return Err(Error::shape(&[d, d], &[m.len()]));
    }
    Ok(cofactor_det(m, d))
}

fn cofactor_det(m: &[f64], d: usize) -> f64 {
    match d {
        0 => 1.0,
        1 => m[0],
        2 => m[0] * m[3] - m[1] * m[2],
        _ => {
            let mut det = 0.0;
            let mut minor = vec![0.0; (d - 1) * (d - 1)];
            for col in 0..d {
                let mut k = 0;
                for r in 1..d {
                    for c in 0..d {
                        if c != col {
                            minor[k] = m[r * d + c];
                            k += 1;
                        }
                    }
                }
                let sign = if col % 2 == 0 { 1.0 } else { -1.0 };
                det += sign * m[col] * cofactor_det(&minor, d - 1);
            }
            det
        }
    }
}

/// Two-pass population covariance of a row-major `d x N` point matrix,
/// written as explicit loops.
pub fn brute_force_cov(points: &[f64], d: usize) -> Result<SymMatrix> {
    if d == 0 || points.len() % d != 0 {
        return Err(Error::shape(&[d, 0], &[points.len()]));
    }
    let n = points.len() / d;
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let mut mean = vec![0.0; d];
    for j in 0..n {
        for i in 0..d {
            mean[i] += points[i * n + j];
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let mut s = 0.0;
            for j in 0..n {
                s += (points[i * n + j] - mean[i]) * (points[k * n + j] - mean[k]);
            }
            cov[i * d + k] = s / n as f64;
        }
    }
    SymMatrix::from_rows(d, cov)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(m: &SymMatrix) -> Result<Vec<f64>> {
    let d = m.dim();
    let mut a = m.as_slice().to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * d + j].powi(2)).sum();
        let scale: f64 = a.iter().map(|v| v * v).sum();
        if off <= 1e-30 * scale || off == 0.0 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    if eig.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("symmetric_eigenvalues"));
    }
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

/// Sampled estimate of the Gaussian bound against the exact value.
#[derive(Debug, Clone, Serialize)]
pub struct GaussianCheck {
    pub dim: usize,
    pub rho: f64,
    pub n: usize,
    pub seeds: usize,
    pub exact_mi: f64,
    pub mean_estimate: f64,
    pub std_estimate: f64,
    pub estimates: Vec<f64>,
    pub abs_error: f64,
    pub within_tolerance: bool,
    pub not_above_exact: bool,
}

/// Tolerance on `|mean estimate - exact|` at `n = 1e5`; doubled each time
/// `n` shrinks by 4x, following the `1 / sqrt(n)` sampling error.
pub fn mi_tolerance(n: usize) -> f64 {
    0.05 * (1e5 / n as f64).sqrt().max(1.0)
}

/// Runs `seeds` independent samples (seeds `base_seed .. base_seed + seeds`)
/// and compares the mean bound to the exact MI.
pub fn check_gaussian(dim: usize, rho: f64, n: usize, seeds: usize, base_seed: u64, rmi: &RmiConfig) -> Result<GaussianCheck> {
    if seeds == 0 {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    let joint = GaussianJoint::per_coordinate(dim, rho)?;
    let exact_mi = gaussian_mi(&joint)?;
    let mut estimates = Vec::with_capacity(seeds);
    for s in 0..seeds as u64 {
        let dist = sample_joint(&joint, n, base_seed.wrapping_add(s))?;
        let stats = estimate_stats(&dist)?;
        let cc = conditional_cov_with(&stats, rmi)?;
        estimates.push(full_lower_bound(&stats, &cc)?);
    }
    let k = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / k;
    let var = if estimates.len() > 1 {
        estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    let std = var.sqrt();
    let abs_error = (mean - exact_mi).abs();
    Ok(GaussianCheck {
        dim,
        rho,
        n,
        seeds,
        exact_mi,
        mean_estimate: mean,
        std_estimate: std,
        estimates,
        abs_error,
        within_tolerance: abs_error <= mi_tolerance(n),
        not_above_exact: mean <= exact_mi + 3.0 * std,
    })
}
