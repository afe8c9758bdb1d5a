//! Files on disk through the loss, against a naive re-derivation: explicit
//! window loops, a joint covariance from `brute_force_cov`, the Schur
//! complement by Gaussian elimination and the determinant by cofactors.

use rmi_core::autodiff::{loss_from_probs, LossConfig};
use rmi_core::oracle::{brute_force_cov, brute_force_det};
use rmi_core::region::{read_pgm_stack, write_pgm_stack, DownsampleConfig, LabelBatch, PoolMode, RegionConfig, SegmentationBatch};
use rmi_core::rmi::RmiConfig;
use rmi_core::rng::SplitMix64;
use rmi_core::tensor::{rmt, DenseTensor};

/// Solves `A X = B` for `d x d` A and `d x m` B by partial pivoting.
fn solve(mut a: Vec<f64>, mut b: Vec<f64>, d: usize, m: usize) -> Vec<f64> {
    for col in 0..d {
        let piv = (col..d).max_by(|&i, &j| a[i * d + col].abs().total_cmp(&a[j * d + col].abs())).unwrap();
        for k in 0..d {
            a.swap(col * d + k, piv * d + k);
        }
        for k in 0..m {
            b.swap(col * m + k, piv * m + k);
        }
        for row in 0..d {
            if row != col {
                let f = a[row * d + col] / a[col * d + col];
                for k in 0..d {
                    a[row * d + k] -= f * a[col * d + k];
                }
                for k in 0..m {
                    b[row * m + k] -= f * b[col * m + k];
                }
            }
        }
    }
    for row in 0..d {
        for k in 0..m {
            b[row * m + k] /= a[row * d + row];
        }
    }
    b
}

fn avg_pool(plane: &[f64], h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h / f, w / f);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh * f {
        for x in 0..ow * f {
            out[(y / f) * ow + x / f] += plane[y * w + x] / (f * f) as f64;
        }
    }
    out
}

/// `-I_l` for one plane pair.
fn naive_term(y: &[f64], p: &[f64], h: usize, w: usize, side: usize, xi: f64) -> f64 {
    let d = side * side;
    let mut joint: Vec<Vec<f64>> = vec![Vec::new(); 2 * d];
    for oy in 0..=h - side {
        for ox in 0..=w - side {
            for ky in 0..side {
                for kx in 0..side {
                    let k = ky * side + kx;
                    joint[k].push(y[(oy + ky) * w + ox + kx]);
                    joint[d + k].push(p[(oy + ky) * w + ox + kx]);
                }
            }
        }
    }
    let flat: Vec<f64> = joint.concat();
    let cov = brute_force_cov(&flat, 2 * d).unwrap();
    let at = |i: usize, j: usize| cov.as_slice()[i * 2 * d + j];
    let sy: Vec<f64> = (0..d * d).map(|k| at(k / d, k % d)).collect();
    let sp: Vec<f64> = (0..d * d).map(|k| at(d + k / d, d + k % d)).collect();
    let c_t: Vec<f64> = (0..d * d).map(|k| at(d + k / d, k % d)).collect();
    let x = solve(sp, c_t.clone(), d, d);
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let cx: f64 = (0..d).map(|k| c_t[k * d + i] * x[k * d + j]).sum();
            m[i * d + j] = sy[i * d + j] - cx + if i == j { xi } else { 0.0 };
        }
    }
    brute_force_det(&m, d).unwrap().ln() / (2.0 * d as f64)
}

fn naive_loss(labels: &LabelBatch, probs: &DenseTensor, c_total: usize, df: usize, side: usize, lambda: f64) -> f64 {
    let (b_total, h, w) = (labels.batch, labels.height, labels.width);
    let hw = h * w;
    let mut bce = 0.0;
    let mut rmi = 0.0;
    for b in 0..b_total {
        for c in 0..c_total {
            let y: Vec<f64> = labels.image(b).iter().map(|&l| f64::from(u8::from(l as usize == c))).collect();
            let p = &probs.data()[(b * c_total + c) * hw..(b * c_total + c + 1) * hw];
            bce -= y.iter().zip(p).map(|(y, p)| y * p.ln() + (1.0 - y) * (1.0 - p).ln()).sum::<f64>();
            let (yp, pp) = (avg_pool(&y, h, w, df), avg_pool(p, h, w, df));
            rmi += naive_term(&yp, &pp, h / df, w / df, side, 1e-6);
        }
    }
    lambda * bce / (b_total * c_total * hw) as f64 + (1.0 - lambda) * rmi / b_total as f64
}

fn write_inputs(dir: &std::path::Path, seed: u64, b: usize, c: usize, h: usize, w: usize) {
    let mut rng = SplitMix64::new(seed);
    let labels = LabelBatch::new(b, h, w, (0..b * h * w).map(|_| rng.below(c) as u32).collect()).unwrap();
    let mut bytes = Vec::new();
    write_pgm_stack(&mut bytes, &labels).unwrap();
    std::fs::write(dir.join("labels.pgm"), bytes).unwrap();
    let probs: Vec<f64> = (0..b * c * h * w).map(|_| 0.05 + 0.9 * rng.next_f64()).collect();
    rmt::save(dir.join("probs.rmt"), &DenseTensor::new(vec![b, c, h, w], probs).unwrap()).unwrap();
}

#[test]
fn loss_from_files_matches_naive_derivation() {
    let dir = tempfile::tempdir().unwrap();
    for (seed, df, side, lambda) in [(1, 1, 2, 0.5), (2, 2, 2, 0.3), (3, 2, 1, 0.0), (4, 1, 1, 0.8)] {
        write_inputs(dir.path(), seed, 2, 3, 14, 12);
        let labels = read_pgm_stack(&std::fs::read(dir.path().join("labels.pgm")).unwrap()).unwrap();
        let probs = rmt::load(dir.path().join("probs.rmt")).unwrap();
        let cfg = LossConfig {
            downsample: DownsampleConfig { factor: df, mode: PoolMode::Average },
            region: RegionConfig::with_side(side),
            rmi: RmiConfig::default(),
            lambda,
            ignore_index: None,
        };
        let expected = naive_loss(&labels, &probs, 3, df, side, lambda);
        let batch = SegmentationBatch::new(labels, probs, None).unwrap();
        let got = loss_from_probs(&batch, &cfg).unwrap();
        // the library's 1e-9 ridge on Sigma_P moves the value at ~1e-8
        assert!((got.total - expected).abs() <= 1e-6 * expected.abs().max(1.0), "seed {seed}: {} vs {expected}", got.total);
        assert_eq!(got.terms.len(), 6);
    }
}

#[test]
fn label_formats_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path(), 9, 3, 4, 9, 7);
    let bytes = std::fs::read(dir.path().join("labels.pgm")).unwrap();
    let labels = read_pgm_stack(&bytes).unwrap();
    assert_eq!(labels.shape(), [3, 9, 7]);
    let mut again = Vec::new();
    write_pgm_stack(&mut again, &labels).unwrap();
    assert_eq!(again, bytes);
    let as_tensor = DenseTensor::new(vec![3, 9, 7], labels.data.iter().map(|&v| f64::from(v)).collect()).unwrap();
    assert_eq!(LabelBatch::from_tensor(&as_tensor).unwrap(), labels);
}
