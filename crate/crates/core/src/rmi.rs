//! Covariance statistics of a region distribution and the normalized
//! mutual-information lower bound built from them.
//!
//! With `Y`, `P` the `d x N` label and prediction points, `C = Cov(Y, P)`:
//!
//! ```text
//! A   = C (Sigma_P + eps I)^{-1}          regression of Y on P
//! M   = Var(Y - A P) + xi I
//! I_l = -logdet(M) / (2 d)
//! ```
//!
//! For `eps -> 0`, `Var(Y - A P)` is the Schur complement
//! `Sigma_Y - C Sigma_P^{-1} C^T`. The small ridge `eps` only keeps the solve
//! defined for (near) constant predictions; because `A` is an almost optimal
//! linear predictor, it moves `M` by `O(eps^2)` only. `logdet` comes from the
//! Cholesky diagonal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::RegionDistribution;
use crate::tensor::{cholesky, matmul, matmul_nt, symmetrize, CholeskyFactor, SymMatrix};

pub const DEFAULT_XI: f64 = 1e-6;
pub const DEFAULT_SIGMA_P_RIDGE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmiConfig {
    /// Added to the diagonal of `M`.
    pub xi: f64,
    /// Added to the diagonal of `Sigma_P` before solving against it.
    pub sigma_p_ridge: f64,
}

impl Default for RmiConfig {
    fn default() -> Self {
        Self { xi: DEFAULT_XI, sigma_p_ridge: DEFAULT_SIGMA_P_RIDGE }
    }
}

impl RmiConfig {
    pub fn with_xi(xi: f64) -> Self {
        Self { xi, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0) || !self.xi.is_finite() {
            return Err(Error::config("xi", format!("must be a positive finite number, got {}", self.xi)));
        }
        if !(self.sigma_p_ridge > 0.0) || !self.sigma_p_ridge.is_finite() {
            return Err(Error::config(
                "sigma-p-ridge",
                format!("must be a positive finite number, got {}", self.sigma_p_ridge),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CovarianceStats {
    pub dim: usize,
    pub count: usize,
    pub mean_y: Vec<f64>,
    pub mean_p: Vec<f64>,
    pub sigma_y: SymMatrix,
    pub sigma_p: SymMatrix,
    /// `Cov(Y, P)`, row-major `d x d`: entry `(i, j)` pairs `y_i` with `p_j`.
    pub cov_yp: Vec<f64>,
    /// Centered point matrices, kept when the stats come from samples.
    pub centered: Option<CenteredPoints>,
}

/// `Y - mu_y 1^T` and `P - mu_p 1^T`, row-major `d x N`.
#[derive(Debug, Clone)]
pub struct CenteredPoints {
    pub y: Vec<f64>,
    pub p: Vec<f64>,
}

impl CovarianceStats {
    /// The regression matrix `Cov(Y,P) Sigma_P^{-1}`, through a ridge-regularized solve.
    pub fn regression_matrix(&self, ridge: f64) -> Result<Vec<f64>> {
        let d = self.dim;
        let f = cholesky(&self.sigma_p.add_diagonal(ridge))?;
        // (Sigma_P^{-1} Cov^T)^T with symmetric Sigma_P
        let mut kt = transpose(&self.cov_yp, d, d);
        f.solve_into(&mut kt, d);
        Ok(transpose(&kt, d, d))
    }
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Column means of a row-major `dim x count` matrix.
pub(crate) fn row_means(points: &[f64], dim: usize, count: usize) -> Vec<f64> {
    (0..dim).map(|k| points[k * count..(k + 1) * count].iter().sum::<f64>() / count as f64).collect()
}

/// Subtracts each row's mean.
pub(crate) fn centered(points: &[f64], mean: &[f64], count: usize) -> Vec<f64> {
    let mut out = points.to_vec();
    for (k, &mu) in mean.iter().enumerate() {
        for v in &mut out[k * count..(k + 1) * count] {
            *v -= mu;
        }
    }
    out
}

/// Centered second moments `A B^T / N` of two centered `d x N` matrices.
fn second_moment(a: &[f64], b: &[f64], dim: usize, count: usize) -> Vec<f64> {
    let mut m = matmul_nt(a, b, dim, count, dim);
    let inv = 1.0 / count as f64;
    for v in &mut m {
        *v *= inv;
    }
    m
}

/// Means and population (`1 / N`) covariances of a region distribution.
pub fn estimate_stats(dist: &RegionDistribution) -> Result<CovarianceStats> {
    let (d, n) = (dist.dim, dist.count);
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let mean_y = row_means(&dist.points_y, d, n);
    let mean_p = row_means(&dist.points_p, d, n);
    let yc = centered(&dist.points_y, &mean_y, n);
    let pc = centered(&dist.points_p, &mean_p, n);
    let sigma_y = SymMatrix::from_rows(d, second_moment(&yc, &yc, d, n))?;
    let sigma_p = SymMatrix::from_rows(d, second_moment(&pc, &pc, d, n))?;
    let cov_yp = second_moment(&yc, &pc, d, n);
    Ok(CovarianceStats {
        dim: d,
        count: n,
        mean_y,
        mean_p,
        sigma_y,
        sigma_p,
        cov_yp,
        centered: Some(CenteredPoints { y: yc, p: pc }),
    })
}

/// Regularized conditional covariance `M` plus the factors that produced it.
#[derive(Debug, Clone)]
pub struct ConditionalCov {
    pub m: SymMatrix,
    pub xi: f64,
    pub sigma_p_ridge: f64,
    factor: CholeskyFactor,
    sigma_p_factor: CholeskyFactor,
    /// `K = (Sigma_P + eps I)^{-1} Cov(Y,P)^T`, row-major `d x d`; `A = K^T`.
    gain: Vec<f64>,
}

impl ConditionalCov {
    pub fn factor(&self) -> &CholeskyFactor {
        &self.factor
    }

    pub fn sigma_p_factor(&self) -> &CholeskyFactor {
        &self.sigma_p_factor
    }

    pub fn gain(&self) -> &[f64] {
        &self.gain
    }

    pub fn dim(&self) -> usize {
        self.m.dim()
    }

    pub fn logdet(&self) -> f64 {
        self.factor.logdet()
    }
}

/// `M = Var(Y - A P) + xi I` with the default `Sigma_P` ridge.
pub fn conditional_cov(stats: &CovarianceStats, xi: f64) -> Result<ConditionalCov> {
    conditional_cov_with(stats, &RmiConfig::with_xi(xi))
}

pub fn conditional_cov_with(stats: &CovarianceStats, cfg: &RmiConfig) -> Result<ConditionalCov> {
    cfg.validate()?;
    let d = stats.dim;
    let sigma_p_factor = cholesky(&stats.sigma_p.add_diagonal(cfg.sigma_p_ridge))?;
    // gain K = S^{-1} C^T, so A = K^T
    let mut gain = transpose(&stats.cov_yp, d, d);
    sigma_p_factor.solve_into(&mut gain, d);
    let mut m = match &stats.centered {
        // Gram form of the residual covariance; no cancellation when the
        // predictions explain the labels almost exactly.
        Some(pts) => {
            let r = residual(&pts.y, &pts.p, &gain, d, stats.count);
            second_moment(&r, &r, d, stats.count)
        }
        // Sigma_Y - A C^T - C A^T + A Sigma_P A^T
        None => {
            let ack = matmul(&stats.cov_yp, &gain, d, d, d);
            let aspk = matmul(&transpose(&gain, d, d), &matmul(stats.sigma_p.as_slice(), &gain, d, d, d), d, d, d);
            (0..d * d)
                .map(|k| {
                    let (i, j) = (k / d, k % d);
                    stats.sigma_y.as_slice()[k] - ack[k] - ack[j * d + i] + aspk[k]
                })
                .collect()
        }
    };
    symmetrize(&mut m, d);
    for i in 0..d {
        m[i * d + i] += cfg.xi;
    }
    let m = SymMatrix::from_rows(d, m)?;
    let factor = cholesky(&m)?;
    Ok(ConditionalCov { m, xi: cfg.xi, sigma_p_ridge: cfg.sigma_p_ridge, factor, sigma_p_factor, gain })
}

/// Regression residual `Yc - A Pc` with `A = K^T`.
pub(crate) fn residual(yc: &[f64], pc: &[f64], gain: &[f64], d: usize, n: usize) -> Vec<f64> {
    let kt = transpose(gain, d, d);
    let pred = matmul(&kt, pc, d, d, n);
    yc.iter().zip(&pred).map(|(y, p)| y - p).collect()
}

/// `I_l = -logdet(M) / (2 d)`.
pub fn rmi_lower_bound(cc: &ConditionalCov) -> f64 {
    -cc.logdet() / (2.0 * cc.dim() as f64)
}

/// Gaussian lower bound on `I(Y; P)` in nats with the entropy of `Y`
/// reinstated: `(logdet(Sigma_Y + xi I) - logdet(M)) / 2`.
pub fn full_lower_bound(stats: &CovarianceStats, cc: &ConditionalCov) -> Result<f64> {
    let hy = cholesky(&stats.sigma_y.add_diagonal(cc.xi))?.logdet();
    Ok(0.5 * (hy - cc.logdet()))
}

/// Per-distribution forward values.
#[derive(Debug, Clone)]
pub struct RmiTerm {
    pub stats: CovarianceStats,
    pub cc: ConditionalCov,
    pub lower_bound: f64,
}

pub fn evaluate(dist: &RegionDistribution, cfg: &RmiConfig) -> Result<RmiTerm> {
    let stats = estimate_stats(dist)?;
    let cc = conditional_cov_with(&stats, cfg)?;
    let lower_bound = rmi_lower_bound(&cc);
    Ok(RmiTerm { stats, cc, lower_bound })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{brute_force_cov, symmetric_eigenvalues};
    use crate::region::PointSource;
    use crate::rng::SplitMix64;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn dist(dim: usize, y: Vec<f64>, p: Vec<f64>) -> RegionDistribution {
        RegionDistribution::from_points(dim, y, p, PointSource::Synthetic).unwrap()
    }

    fn random_binary_dist(rng: &mut SplitMix64, d: usize, n: usize) -> RegionDistribution {
        let y: Vec<f64> = (0..d * n).map(|_| f64::from(rng.below(2) as u8)).collect();
        let p: Vec<f64> = y.iter().map(|&v| (0.6 * v + 0.4 * rng.next_f64()).clamp(0.0, 1.0)).collect();
        RegionDistribution::from_points(d, y, p, PointSource::BinaryLabels).unwrap()
    }

    /// `M` built straight from its definition, for taking eigenvalues.
    fn schur(stats: &CovarianceStats, ridge: f64) -> Vec<f64> {
        let d = stats.dim;
        let reg = stats.regression_matrix(ridge).unwrap();
        let red = matmul_nt(&reg, &stats.cov_yp, d, d, d);
        stats.sigma_y.as_slice().iter().zip(&red).map(|(a, b)| a - b).collect()
    }

    #[test]
    fn constant_points() {
        let s = estimate_stats(&dist(2, vec![0.5; 10], vec![0.25; 10])).unwrap();
        assert_eq!(s.mean_y, vec![0.5, 0.5]);
        assert_eq!(s.mean_p, vec![0.25, 0.25]);
        assert!(s.sigma_y.as_slice().iter().chain(s.sigma_p.as_slice()).chain(&s.cov_yp).all(|&v| v == 0.0));
    }

    #[test]
    fn bernoulli_half_variance() {
        let s = estimate_stats(&dist(1, vec![0.0, 1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0, 0.0])).unwrap();
        assert_eq!(s.sigma_p.get(0, 0), 0.25);
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(estimate_stats(&dist(2, vec![0.0; 2], vec![0.0; 2])), Err(Error::TooFewSamples(1))));
    }

    #[test]
    fn matches_brute_force_loops() {
        let mut rng = SplitMix64::new(10);
        let (d, n) = (3, 50);
        let y: Vec<f64> = (0..d * n).map(|_| rng.next_f64()).collect();
        let p: Vec<f64> = (0..d * n).map(|_| rng.next_f64()).collect();
        let s = estimate_stats(&dist(d, y.clone(), p.clone())).unwrap();
        let by = brute_force_cov(&y, d).unwrap();
        let bp = brute_force_cov(&p, d).unwrap();
        for k in 0..d * d {
            assert!((s.sigma_y.as_slice()[k] - by.as_slice()[k]).abs() <= 1e-12);
            assert!((s.sigma_p.as_slice()[k] - bp.as_slice()[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn cross_covariance_is_transpose_of_swapped() {
        let mut rng = SplitMix64::new(12);
        let d = 4;
        let y: Vec<f64> = (0..d * 30).map(|_| rng.next_f64()).collect();
        let p: Vec<f64> = (0..d * 30).map(|_| rng.next_f64()).collect();
        let yp = estimate_stats(&dist(d, y.clone(), p.clone())).unwrap().cov_yp;
        let py = estimate_stats(&dist(d, p, y)).unwrap().cov_yp;
        let pyt = transpose(&py, d, d);
        for (a, b) in yp.iter().zip(&pyt) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn independent_case_is_sigma_y_plus_xi() {
        // p is constant in the first coordinate pattern, so Cov(Y, P) = 0.
        let y = vec![0.0, 1.0, 0.0, 1.0];
        let p = vec![0.3, 0.3, 0.3, 0.3];
        let s = estimate_stats(&dist(1, y, p)).unwrap();
        let cc = conditional_cov(&s, 1e-6).unwrap();
        assert_eq!(cc.m.get(0, 0), 0.25 + 1e-6);
    }

    #[test]
    fn ridge_moves_m_only_at_second_order() {
        let mut rng = SplitMix64::new(18);
        let d = random_binary_dist(&mut rng, 4, 300);
        let s = estimate_stats(&d).unwrap();
        let exact = schur(&s, 1e-15);
        for eps in [1e-9, 1e-7] {
            let cc = conditional_cov_with(&s, &RmiConfig { xi: 1e-6, sigma_p_ridge: eps }).unwrap();
            let first_order = schur(&s, eps);
            for k in 0..16 {
                let shift = if k % 5 == 0 { 1e-6 } else { 0.0 };
                let dm = (cc.m.as_slice()[k] - shift - exact[k]).abs();
                // Schur with the ridge moves by O(eps); the residual form by O(eps^2).
                assert!(dm <= 1e-12 + 1e3 * eps * eps, "{eps} {dm}");
                assert!((first_order[k] - exact[k]).abs() <= 1e2 * eps);
            }
        }
    }

    #[test]
    fn stats_only_fallback_matches_point_form() {
        let mut rng = SplitMix64::new(19);
        let d = random_binary_dist(&mut rng, 3, 50);
        let s = estimate_stats(&d).unwrap();
        let cfg = RmiConfig { xi: 1e-6, sigma_p_ridge: 1e-3 };
        let a = conditional_cov_with(&s, &cfg).unwrap();
        let b = conditional_cov_with(&CovarianceStats { centered: None, ..s }, &cfg).unwrap();
        for (x, y) in a.m.as_slice().iter().zip(b.m.as_slice()) {
            assert!((x - y).abs() <= 1e-14);
        }
    }

    #[test]
    fn perfect_prediction_hits_the_floor() {
        let mut rng = SplitMix64::new(13);
        let d = random_binary_dist(&mut rng, 9, 400);
        let perfect = dist(9, d.points_y.clone(), d.points_y.clone());
        let cc = conditional_cov(&estimate_stats(&perfect).unwrap(), DEFAULT_XI).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                let e = if i == j { DEFAULT_XI } else { 0.0 };
                assert!((cc.m.get(i, j) - e).abs() < 1e-11, "{i} {j} {}", cc.m.get(i, j));
            }
        }
        assert!((rmi_lower_bound(&cc) + 0.5 * DEFAULT_XI.ln()).abs() < 1e-6);
    }

    #[test]
    fn lower_bound_examples() {
        let mk = |m: SymMatrix| {
            let stats = CovarianceStats {
                dim: m.dim(),
                count: 2,
                mean_y: vec![0.0; m.dim()],
                mean_p: vec![0.0; m.dim()],
                sigma_y: m.add_diagonal(-1e-6),
                sigma_p: SymMatrix::identity(m.dim()),
                cov_yp: vec![0.0; m.dim() * m.dim()],
                centered: None,
            };
            rmi_lower_bound(&conditional_cov(&stats, 1e-6).unwrap())
        };
        assert_relative_eq!(mk(SymMatrix::scaled_identity(5, 1e-6)), -0.5 * 1e-6f64.ln(), epsilon = 1e-9);
        assert_relative_eq!(mk(SymMatrix::scaled_identity(5, 1e-6)), 6.9078, epsilon = 1e-4);
        assert!(mk(SymMatrix::identity(3)).abs() < 1e-12);
        assert_relative_eq!(mk(SymMatrix::diagonal(&[2.0, 3.0])), -0.25 * 6f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(mk(SymMatrix::diagonal(&[2.0, 3.0])), -0.44794, epsilon = 1e-5);
    }

    #[test]
    fn rejects_non_positive_xi() {
        let s = estimate_stats(&dist(1, vec![0.0, 1.0], vec![0.0, 1.0])).unwrap();
        assert!(matches!(conditional_cov(&s, 0.0), Err(Error::InvalidConfig { field: "xi", .. })));
        assert!(matches!(conditional_cov(&s, -1.0), Err(Error::InvalidConfig { .. })));
    }

    #[test]
    fn full_bound_zero_without_dependence() {
        let mut rng = SplitMix64::new(14);
        let y: Vec<f64> = (0..40).map(|_| rng.next_f64()).collect();
        let s0 = estimate_stats(&dist(2, y.clone(), vec![0.5; 40])).unwrap();
        let cc = conditional_cov(&s0, DEFAULT_XI).unwrap();
        assert!(full_lower_bound(&s0, &cc).unwrap().abs() < 1e-12);
    }

    #[test]
    fn full_bound_grows_for_identical_points() {
        let mut rng = SplitMix64::new(15);
        let y: Vec<f64> = (0..2 * 500).map(|_| rng.next_normal()).collect();
        let s = estimate_stats(&dist(2, y.clone(), y)).unwrap();
        let cc = conditional_cov(&s, DEFAULT_XI).unwrap();
        let v = full_lower_bound(&s, &cc).unwrap();
        // 0.5 * (logdet(Sigma_Y) - 2 log xi) with Sigma_Y ~ I
        assert!(v > 12.0, "{v}");
    }

    #[test]
    fn trace_log_matches_cholesky() {
        let mut rng = SplitMix64::new(16);
        for d in 1..=4 {
            let dist = random_binary_dist(&mut rng, d, 60);
            let cc = conditional_cov(&estimate_stats(&dist).unwrap(), DEFAULT_XI).unwrap();
            let trlog: f64 = symmetric_eigenvalues(&cc.m).unwrap().iter().map(|l| l.ln()).sum();
            let via_eig = -trlog / (2.0 * d as f64);
            assert!((via_eig - rmi_lower_bound(&cc)).abs() <= 1e-10);
        }
    }

    #[test]
    fn monotone_in_dependence() {
        let mut rng = SplitMix64::new(17);
        let n = 20_000;
        let base: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
        let noise: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
        let mut prev = f64::NEG_INFINITY;
        for rho in [0.0, 0.3, 0.6, 0.9f64] {
            let p: Vec<f64> = base.iter().zip(&noise).map(|(b, e)| rho * b + (1.0 - rho * rho).sqrt() * e).collect();
            let s = estimate_stats(&dist(1, base.clone(), p)).unwrap();
            let v = full_lower_bound(&s, &conditional_cov(&s, DEFAULT_XI).unwrap()).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn floor_and_schur_psd(seed in any::<u64>(), d in 1usize..=4, n in 2usize..80) {
            let mut rng = SplitMix64::new(seed);
            let dist = random_binary_dist(&mut rng, d, n);
            let stats = estimate_stats(&dist).unwrap();
            let cc = conditional_cov(&stats, DEFAULT_XI).unwrap();
            prop_assert!(rmi_lower_bound(&cc) <= -0.5 * DEFAULT_XI.ln() + 1e-9);
            let s = SymMatrix::from_rows(d, schur(&stats, DEFAULT_SIGMA_P_RIDGE)).unwrap();
            let min = symmetric_eigenvalues(&s).unwrap().into_iter().fold(f64::INFINITY, f64::min);
            prop_assert!(min >= -1e-8, "min eigenvalue {}", min);
            for m in [&stats.sigma_y, &stats.sigma_p] {
                let min = symmetric_eigenvalues(m).unwrap().into_iter().fold(f64::INFINITY, f64::min);
                prop_assert!(min >= -1e-10);
            }
        }

        #[test]
        fn column_permutation_invariance(seed in any::<u64>(), d in 1usize..=9, n in 10usize..60) {
            let mut rng = SplitMix64::new(seed);
            let dist = random_binary_dist(&mut rng, d, n);
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let permute = |pts: &[f64]| -> Vec<f64> {
                let mut out = vec![0.0; d * n];
                for k in 0..d {
                    for (j, &src) in perm.iter().enumerate() {
                        out[k * n + j] = pts[k * n + src];
                    }
                }
                out
            };
            let shuffled = RegionDistribution::from_points(d, permute(&dist.points_y), permute(&dist.points_p), dist.source).unwrap();
            let a = evaluate(&dist, &RmiConfig::default()).unwrap();
            let b = evaluate(&shuffled, &RmiConfig::default()).unwrap();
            for (x, y) in a.cc.m.as_slice().iter().zip(b.cc.m.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            for (x, y) in a.stats.cov_yp.iter().zip(&b.stats.cov_yp) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            prop_assert!((a.lower_bound - b.lower_bound).abs() <= 1e-9 * a.lower_bound.abs().max(1.0));
        }
    }
}
