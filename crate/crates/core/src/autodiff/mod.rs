//! The training objective `lambda * BCE + (1 - lambda) / B * sum_{b,c} -I_l`
//! and its gradient with respect to the prediction logits.
//!
//! Probabilities are per-channel sigmoids of the logits. The backward pass
//! is written out by hand for this one graph:
//!
//! * `d(-I_l)/dM = M^{-1} / (2d)`, with `M^{-1}` from triangular solves;
//! * through `M = R R^T / N + xi I`, `R = Yc - A Pc` and the ridge regression
//!   `A = C S^{-1}`, `S = Sigma_P + eps I`;
//! * through the centered products `C = Yc Pc^T / N`, `S = Pc Pc^T / N + eps I`;
//! * window scatter-add, the pooling adjoint, and `sigma'(z) = p (1 - p)`.

pub mod extended;
pub mod gradcheck;

pub use extended::ExtendedObjective;
pub use gradcheck::{gradcheck, gradcheck_with, random_instance, FdPrecision, GradCheckReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::{
    downsample_plane, downsample_plane_backward, gather_windows, label_layout, one_hot, scatter_windows,
    DownsampleConfig, LabelBatch, MapKind, PooledPlane, RegionConfig, RegionDistribution, SegmentationBatch,
};
use crate::rmi::{centered, evaluate, residual, transpose, RmiConfig, RmiTerm};
use crate::tensor::{matmul, DenseTensor};

pub const DEFAULT_LAMBDA: f64 = 0.5;
/// BCE reads probabilities clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub const BCE_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub downsample: DownsampleConfig,
    pub region: RegionConfig,
    pub rmi: RmiConfig,
    /// Weight of the BCE term; the RMI term gets `1 - lambda`.
    pub lambda: f64,
    pub ignore_index: Option<u32>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            downsample: DownsampleConfig::default(),
            region: RegionConfig::default(),
            rmi: RmiConfig::default(),
            lambda: DEFAULT_LAMBDA,
            ignore_index: Some(255),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.downsample.validate()?;
        self.region.validate()?;
        self.rmi.validate()?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda", format!("must lie in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }
}

/// One `(image, class)` record of the RMI term.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TermRecord {
    pub b: usize,
    pub c: usize,
    pub n: usize,
    pub d: usize,
    pub i_l: f64,
    pub logdet_m: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub bce: f64,
    /// `1/B * sum_{b,c} -I_l`, before the `1 - lambda` weight.
    pub rmi: f64,
    pub lambda: f64,
    pub terms: Vec<TermRecord>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn bce_entry(y: f64, p: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Mean BCE over non-ignored `(pixel, class)` entries, and that entry count.
fn bce_mean(onehot: &[f64], probs: &[f64], ignore: &[bool], classes: usize, hw: usize) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0;
    for (plane, (y, p)) in onehot.chunks_exact(hw).zip(probs.chunks_exact(hw)).enumerate() {
        let b = plane / classes;
        let mask = &ignore[b * hw..(b + 1) * hw];
        for k in 0..hw {
            if !mask[k] {
                sum += bce_entry(y[k], p[k]);
                count += 1;
            }
        }
    }
    (if count > 0 { sum / count as f64 } else { 0.0 }, count)
}

struct SavedTerm {
    dist: RegionDistribution,
    term: RmiTerm,
    pooled: PooledPlane,
}

/// Forward state for one [`GradientTape::backward`] call.
pub struct GradientTape {
    saved: Option<TapeState>,
}

struct TapeState {
    cfg: LossConfig,
    shape: [usize; 4],
    probs: Vec<f64>,
    onehot: Vec<f64>,
    ignore: Vec<bool>,
    bce_count: usize,
    terms: Vec<SavedTerm>,
}

/// Forward pass shared by the probability and logit entry points.
fn forward(labels: &LabelBatch, probs: &DenseTensor, cfg: &LossConfig) -> Result<(LossReport, TapeState)> {
    cfg.validate()?;
    let batch = SegmentationBatch::new(labels.clone(), probs.clone(), cfg.ignore_index)?;
    let [b_total, c_total, h, w] = [labels.batch, batch.num_classes(), labels.height, labels.width];
    let hw = h * w;
    let oh = one_hot(labels, c_total, cfg.ignore_index)?;
    let (bce, bce_count) = bce_mean(oh.volume.data(), probs.data(), &oh.ignore_mask, c_total, hw);

    let layout = label_layout(labels, c_total, cfg.ignore_index, cfg.downsample, cfg.region)?;
    let gw = layout.geometry.width;
    let mut saved = Vec::with_capacity(b_total * c_total);
    let mut records = Vec::with_capacity(b_total * c_total);
    let mut rmi_sum = 0.0;
    for b in 0..b_total {
        let origins = &layout.origins[b];
        for c in 0..c_total {
            let pooled = downsample_plane(batch.prob_plane(b, c), h, w, cfg.downsample, MapKind::Probability)?;
            let y = gather_windows(&layout.pooled_labels[b * c_total + c], gw, cfg.region.side, origins);
            let p = gather_windows(&pooled.values, gw, cfg.region.side, origins);
            let mut dist = RegionDistribution::from_points(y.dim, y.data, p.data, crate::region::PointSource::PooledLabels)?;
            dist.batch = b;
            dist.class = c;
            dist.origins = origins.clone();
            let term = evaluate(&dist, &cfg.rmi)?;
            rmi_sum -= term.lower_bound;
            records.push(TermRecord {
                b,
                c,
                n: dist.count,
                d: dist.dim,
                i_l: term.lower_bound,
                logdet_m: term.cc.logdet(),
            });
            saved.push(SavedTerm { dist, term, pooled });
        }
    }
    let rmi = rmi_sum / b_total as f64;
    let total = cfg.lambda * bce + (1.0 - cfg.lambda) * rmi;
    if !total.is_finite() {
        return Err(Error::NonFinite("loss forward"));
    }
    let report = LossReport { total, bce, rmi, lambda: cfg.lambda, terms: records };
    let state = TapeState {
        cfg: *cfg,
        shape: [b_total, c_total, h, w],
        probs: probs.data().to_vec(),
        onehot: oh.volume.into_data(),
        ignore: oh.ignore_mask,
        bce_count,
        terms: saved,
    };
    Ok((report, state))
}

/// Loss on given probabilities (no tape).
pub fn loss_from_probs(batch: &SegmentationBatch, cfg: &LossConfig) -> Result<LossReport> {
    let cfg = LossConfig { ignore_index: batch.ignore_index(), ..*cfg };
    forward(batch.labels(), batch.probs(), &cfg).map(|(r, _)| r)
}

/// Loss on `sigmoid(logits)` plus the tape for its gradient.
pub fn forward_with_tape(labels: &LabelBatch, logits: &DenseTensor, cfg: &LossConfig) -> Result<(LossReport, GradientTape)> {
    let probs = DenseTensor::new(logits.shape().to_vec(), logits.data().iter().map(|&z| sigmoid(z)).collect())?;
    let (report, state) = forward(labels, &probs, cfg)?;
    Ok((report, GradientTape { saved: Some(state) }))
}

/// Loss value only, on logits.
pub fn loss_from_logits(labels: &LabelBatch, logits: &DenseTensor, cfg: &LossConfig) -> Result<f64> {
    forward_with_tape(labels, logits, cfg).map(|(r, _)| r.total)
}

/// Gradient of `weight * (-I_l)` with respect to the prediction points
/// (row-major `d x N`).
pub fn rmi_term_gradient(dist: &RegionDistribution, term: &RmiTerm, weight: f64) -> Vec<f64> {
    let (d, n) = (dist.dim, dist.count);
    let cc = &term.cc;
    let eps = cc.sigma_p_ridge;
    // G = weight * M^{-1} / (2d)
    let mut g = cc.factor().inverse().into_vec();
    let scale = weight / (2.0 * d as f64);
    for v in &mut g {
        *v *= scale;
    }
    let k = cc.gain();
    let (yc, pc) = match &term.stats.centered {
        Some(pts) => (pts.y.clone(), pts.p.clone()),
        None => (centered(&dist.points_y, &term.stats.mean_y, n), centered(&dist.points_p, &term.stats.mean_p, n)),
    };
    let r = residual(&yc, &pc, k, d, n);

    // M = R R^T / N + xi I with R = Yc - A Pc, A = C S^{-1}, S = Sigma_P + eps I
    //   dL/dR = 2 G R / N
    //   dL/dA = -dL/dR Pc^T = -2 eps G A        (R Pc^T = N eps A)
    //   dL/dC = dL/dA S^{-1},  dL/dS = -A^T dL/dA S^{-1}
    let kg = matmul(k, &g, d, d, d); // A^T G
    let mut gc_t = kg.clone(); // (dL/dC)^T = -2 eps S^{-1} A^T G
    cc.sigma_p_factor().solve_into(&mut gc_t, d);
    let mut w = matmul(&kg, &transpose(k, d, d), d, d, d); // A^T G A
    cc.sigma_p_factor().solve_into(&mut w, d); // W = S^{-1} A^T G A
    // dL/dS + (dL/dS)^T = 2 eps (W + W^T)
    let mut ws = transpose(&w, d, d);
    for (a, b) in ws.iter_mut().zip(&w) {
        *a += b;
    }

    let direct = matmul(&kg, &r, d, d, n);
    let via_cov = matmul(&gc_t, &yc, d, d, n);
    let via_sigma = matmul(&ws, &pc, d, d, n);
    let inv_n = 1.0 / n as f64;
    (0..d * n)
        .map(|i| (-2.0 * direct[i] - 2.0 * eps * via_cov[i] + 2.0 * eps * via_sigma[i]) * inv_n)
        .collect()
}

impl GradientTape {
    /// Gradient of the loss with respect to the logits, `B x C x H x W`.
    /// Fails with [`Error::TapeConsumed`] on a second call.
    pub fn backward(&mut self) -> Result<DenseTensor> {
        let state = self.saved.take().ok_or(Error::TapeConsumed)?;
        let [b_total, c_total, h, w] = state.shape;
        let hw = h * w;
        let cfg = state.cfg;
        let mut grad_p = vec![0.0; state.probs.len()];

        let rmi_weight = (1.0 - cfg.lambda) / b_total as f64;
        if rmi_weight != 0.0 {
            for saved in &state.terms {
                let (b, c) = (saved.dist.batch, saved.dist.class);
                let pts = rmi_term_gradient(&saved.dist, &saved.term, rmi_weight);
                let (gh, gw) = (saved.pooled.height, saved.pooled.width);
                let pooled_grad = scatter_windows(&pts, gh, gw, cfg.region.side, &saved.dist.origins);
                let plane = downsample_plane_backward(&pooled_grad, &saved.pooled, h, w, cfg.downsample, MapKind::Probability);
                let start = (b * c_total + c) * hw;
                for (g, v) in grad_p[start..start + hw].iter_mut().zip(plane) {
                    *g += v;
                }
            }
        }

        let bce_scale = if state.bce_count > 0 { cfg.lambda / state.bce_count as f64 } else { 0.0 };
        let mut grad = vec![0.0; state.probs.len()];
        for idx in 0..grad.len() {
            let p = state.probs[idx];
            let mut gz = grad_p[idx] * p * (1.0 - p);
            let pixel = (idx / (c_total * hw)) * hw + idx % hw;
            if bce_scale != 0.0 && !state.ignore[pixel] && (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                gz += bce_scale * (p - state.onehot[idx]);
            }
            grad[idx] = gz;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("loss backward"));
        }
        DenseTensor::new(vec![b_total, c_total, h, w], grad)
    }

    pub fn is_consumed(&self) -> bool {
        self.saved.is_none()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::PoolMode;
    use crate::rmi::DEFAULT_XI;
    use crate::rng::SplitMix64;

    fn cfg(df: usize, mode: PoolMode, lambda: f64) -> LossConfig {
        LossConfig {
            downsample: DownsampleConfig { factor: df, mode },
            lambda,
            ..LossConfig::default()
        }
    }

    fn central(labels: &LabelBatch, logits: &DenseTensor, cfg: &LossConfig, idx: usize, h: f64) -> f64 {
        let mut plus = logits.data().to_vec();
        let mut minus = plus.clone();
        plus[idx] += h;
        minus[idx] -= h;
        let plus = DenseTensor::new(logits.shape().to_vec(), plus).unwrap();
        let minus = DenseTensor::new(logits.shape().to_vec(), minus).unwrap();
        (loss_from_logits(labels, &plus, cfg).unwrap() - loss_from_logits(labels, &minus, cfg).unwrap()) / (2.0 * h)
    }

    #[test]
    fn lambda_one_is_plain_bce() {
        let (labels, logits) = random_instance(1, 3, 8, 8, 1);
        let c = cfg(2, PoolMode::Average, 1.0);
        let (report, mut tape) = forward_with_tape(&labels, &logits, &c).unwrap();
        assert_eq!(report.total, report.bce);
        let g = tape.backward().unwrap();
        let count = (8 * 8 * 3) as f64;
        let oh = one_hot(&labels, 3, None).unwrap();
        for (i, &z) in logits.data().iter().enumerate() {
            let expected = (sigmoid(z) - oh.volume.data()[i]) / count;
            assert!((g.data()[i] - expected).abs() <= 1e-18, "{i}");
        }
    }

    #[test]
    fn tape_is_single_use() {
        let (labels, logits) = random_instance(1, 2, 8, 8, 2);
        let (_, mut tape) = forward_with_tape(&labels, &logits, &cfg(2, PoolMode::Average, 0.5)).unwrap();
        assert!(!tape.is_consumed());
        tape.backward().unwrap();
        assert!(tape.is_consumed());
        assert!(matches!(tape.backward(), Err(Error::TapeConsumed)));
    }

    #[test]
    fn composes_module_values() {
        // B = 1, C = 1, 8x8: the objective equals BCE and I_l assembled by hand.
        let (labels, logits) = random_instance(1, 1, 8, 8, 3);
        let labels = LabelBatch::new(1, 8, 8, labels.data.iter().map(|_| 0).collect()).unwrap();
        let c = cfg(2, PoolMode::Average, 0.5);
        let (report, _) = forward_with_tape(&labels, &logits, &c).unwrap();
        let probs: Vec<f64> = logits.data().iter().map(|&z| sigmoid(z)).collect();
        let bce: f64 = probs.iter().map(|&p| -p.ln()).sum::<f64>() / 64.0;
        let pooled = downsample_plane(&probs, 8, 8, c.downsample, MapKind::Probability).unwrap();
        let pts = crate::region::unfold(&pooled.values, 4, 4, 3).unwrap();
        let dist = RegionDistribution::from_points(9, vec![1.0; 36], pts.data, crate::region::PointSource::PooledLabels).unwrap();
        let il = evaluate(&dist, &RmiConfig::default()).unwrap().lower_bound;
        // all-ones labels: Sigma_Y = 0 and Cov = 0, so M = xi I
        assert!((il + 0.5 * DEFAULT_XI.ln()).abs() < 1e-9);
        assert!((report.bce - bce).abs() < 1e-14);
        assert!((report.total - (0.5 * bce - 0.5 * il)).abs() < 1e-12);
        assert_eq!(report.terms.len(), 1);
        assert_eq!((report.terms[0].n, report.terms[0].d), (4, 9));
    }

    #[test]
    fn matches_central_differences_for_every_pool_mode() {
        for (mode, df) in [(PoolMode::Average, 2), (PoolMode::Max, 2), (PoolMode::Interpolate, 2), (PoolMode::Interpolate, 3), (PoolMode::Average, 1)] {
            let (labels, logits) = random_instance(1, 2, 24, 24, 4);
            let c = cfg(df, mode, 0.3);
            let (_, mut tape) = forward_with_tape(&labels, &logits, &c).unwrap();
            let g = tape.backward().unwrap();
            let mut rng = SplitMix64::new(5);
            for _ in 0..25 {
                let idx = rng.below(logits.len());
                let fd = central(&labels, &logits, &c, idx, 1e-4);
                let a = g.data()[idx];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                assert!(rel <= 1e-5, "{mode:?} df={df} idx={idx} analytic={a} fd={fd}");
            }
        }
    }

    #[test]
    fn extended_differences_for_every_pool_mode() {
        for (mode, df) in [(PoolMode::Average, 2), (PoolMode::Max, 2), (PoolMode::Interpolate, 2), (PoolMode::Interpolate, 3), (PoolMode::Average, 1)] {
            let (labels, logits) = random_instance(2, 2, 12, 12, 6);
            let r = gradcheck(&labels, &logits, &cfg(df, mode, 0.3), 40, 1e-5, 7).unwrap();
            assert!(r.max_rel_err <= 1e-6, "{mode:?} df={df} {r:?}");
        }
    }

    #[test]
    fn term_gradient_matches_differences_on_points() {
        use crate::region::PointSource;
        let (d, n) = (3, 40);
        let mut rng = SplitMix64::new(21);
        let y: Vec<f64> = (0..d * n).map(|_| rng.below(2) as f64).collect();
        let p: Vec<f64> = y.iter().map(|v| 0.6 * v + 0.3 * rng.next_f64()).collect();
        for eps in [1e-9, 1e-2] {
            let rc = RmiConfig { xi: 1e-3, sigma_p_ridge: eps };
            let f = |p: &[f64]| {
                let dist = RegionDistribution::from_points(d, y.clone(), p.to_vec(), PointSource::Synthetic).unwrap();
                -evaluate(&dist, &rc).unwrap().lower_bound
            };
            let dist = RegionDistribution::from_points(d, y.clone(), p.clone(), PointSource::Synthetic).unwrap();
            let term = evaluate(&dist, &rc).unwrap();
            let g = rmi_term_gradient(&dist, &term, 1.0);
            for idx in [0, 7, 33, 64, 119] {
                let h = 1e-6;
                let mut pp = p.clone();
                pp[idx] += h;
                let mut pm = p.clone();
                pm[idx] -= h;
                let fd = (f(&pp) - f(&pm)) / (2.0 * h);
                assert!((g[idx] - fd).abs() <= 1e-7 * fd.abs().max(1.0), "eps={eps} idx={idx} {} {fd}", g[idx]);
            }
        }
    }

    #[test]
    fn constant_probabilities_pure_rmi() {
        let (labels, _) = random_instance(1, 2, 12, 12, 6);
        let logits = DenseTensor::new(vec![1, 2, 12, 12], vec![0.3; 288]).unwrap();
        let c = cfg(2, PoolMode::Average, 0.0);
        let (_, mut tape) = forward_with_tape(&labels, &logits, &c).unwrap();
        let g = tape.backward().unwrap();
        assert!(g.data().iter().all(|v| v.is_finite()));
        let mut rng = SplitMix64::new(7);
        for _ in 0..10 {
            let idx = rng.below(logits.len());
            // Cov(Y, P) = 0 and Sigma_P = 0: the gradient vanishes exactly, and
            // the central difference goes to zero as h^2.
            assert_eq!(g.data()[idx], 0.0);
            let coarse = central(&labels, &logits, &c, idx, 1e-5);
            let fine = central(&labels, &logits, &c, idx, 1e-6);
            assert!(fine.abs() <= 1e-7, "{fine}");
            assert!(fine.abs() <= coarse.abs() / 50.0 + 1e-10, "{coarse} {fine}");
        }
    }

    #[test]
    fn batch_gradient_is_sum_of_image_gradients() {
        let (labels, logits) = random_instance(2, 2, 12, 12, 8);
        let c = cfg(2, PoolMode::Average, 0.0);
        let (_, mut tape) = forward_with_tape(&labels, &logits, &c).unwrap();
        let g = tape.backward().unwrap();
        let plane = 2 * 144;
        for b in 0..2 {
            let l = LabelBatch::new(1, 12, 12, labels.image(b).to_vec()).unwrap();
            let z = DenseTensor::new(vec![1, 2, 12, 12], logits.data()[b * plane..(b + 1) * plane].to_vec()).unwrap();
            let (_, mut t) = forward_with_tape(&l, &z, &c).unwrap();
            let gb = t.backward().unwrap();
            for (x, y) in g.data()[b * plane..(b + 1) * plane].iter().zip(gb.data()) {
                // batch term averages over B = 2
                assert!((x - 0.5 * y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn ignored_pixels_get_zero_gradient() {
        let (mut labels, logits) = random_instance(1, 2, 12, 12, 9);
        // ignore the whole top-left 4x4 block
        for y in 0..4 {
            for x in 0..4 {
                labels.data[y * 12 + x] = 255;
            }
        }
        let c = cfg(2, PoolMode::Average, 0.5);
        let (_, mut tape) = forward_with_tape(&labels, &logits, &c).unwrap();
        let g = tape.backward().unwrap();
        for ch in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(g.get(&[0, ch, y, x]), 0.0);
                }
            }
        }
    }

    #[test]
    fn untouched_border_gets_only_bce() {
        // 13x13 with DF = 2 drops the last row and column from pooling.
        let (labels, logits) = random_instance(1, 2, 13, 13, 10);
        let c = cfg(2, PoolMode::Average, 0.0);
        let (_, mut tape) = forward_with_tape(&labels, &logits, &c).unwrap();
        let g = tape.backward().unwrap();
        for ch in 0..2 {
            for k in 0..13 {
                assert_eq!(g.get(&[0, ch, 12, k]), 0.0);
                assert_eq!(g.get(&[0, ch, k, 12]), 0.0);
            }
        }
    }

    #[test]
    fn horizontal_flip_equivariance() {
        let (labels, logits) = random_instance(1, 3, 12, 12, 11);
        let flip = |data: &[f64], planes: usize| -> Vec<f64> {
            let mut out = data.to_vec();
            for p in 0..planes {
                for y in 0..12 {
                    for x in 0..12 {
                        out[p * 144 + y * 12 + x] = data[p * 144 + y * 12 + 11 - x];
                    }
                }
            }
            out
        };
        let fl: Vec<u32> = (0..144).map(|i| labels.data[(i / 12) * 12 + 11 - i % 12]).collect();
        let flabels = LabelBatch::new(1, 12, 12, fl).unwrap();
        let flogits = DenseTensor::new(vec![1, 3, 12, 12], flip(logits.data(), 3)).unwrap();
        let c = cfg(2, PoolMode::Average, 0.5);
        let (r1, mut t1) = forward_with_tape(&labels, &logits, &c).unwrap();
        let (r2, mut t2) = forward_with_tape(&flabels, &flogits, &c).unwrap();
        assert!((r1.total - r2.total).abs() <= 1e-10 * r1.total.abs());
        let g1 = flip(t1.backward().unwrap().data(), 3);
        let g2 = t2.backward().unwrap();
        let scale = g1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in g1.iter().zip(g2.data()) {
            assert!((a - b).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn rejects_invalid_lambda() {
        let (labels, logits) = random_instance(1, 1, 8, 8, 12);
        let c = cfg(2, PoolMode::Average, 1.5);
        assert!(matches!(forward_with_tape(&labels, &logits, &c), Err(Error::InvalidConfig { field: "lambda", .. })));
    }
}
