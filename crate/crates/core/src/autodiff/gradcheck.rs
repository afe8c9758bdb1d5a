use serde::Serialize;

use super::extended::ExtendedObjective;
use super::{forward_with_tape, loss_from_logits, LossConfig};
use crate::error::{Error, Result};
use crate::region::LabelBatch;
use crate::rng::SplitMix64;
use crate::tensor::DenseTensor;

/// Arithmetic used for the loss evaluations inside the central differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FdPrecision {
    /// Double-double evaluation; rounding noise ~1e-32 |f| / h.
    #[default]
    DoubleDouble,
    /// The `f64` forward pass; rounding noise ~1e-16 |f| / h.
    Native,
}

impl std::str::FromStr for FdPrecision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dd" | "double-double" => Ok(Self::DoubleDouble),
            "f64" | "native" => Ok(Self::Native),
            _ => Err(format!("unknown precision {s:?}, expected dd or f64")),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub max_abs_err: f64,
    /// `|a - f| / max(|a|, |f|, 1e-8)` maximized over probes.
    pub max_rel_err: f64,
    pub probe_count: usize,
    /// `[b, c, h, w]` of the probe with the largest relative error.
    pub worst_coordinate: [usize; 4],
    pub precision: FdPrecision,
}

/// Uniform random labels and standard normal logits.
pub fn random_instance(batch: usize, classes: usize, height: usize, width: usize, seed: u64) -> (LabelBatch, DenseTensor) {
    let mut rng = SplitMix64::new(seed);
    let labels: Vec<u32> = (0..batch * height * width).map(|_| rng.below(classes) as u32).collect();
    let logits: Vec<f64> = (0..batch * classes * height * width).map(|_| rng.next_normal()).collect();
    (
        LabelBatch::new(batch, height, width, labels).expect("consistent sizes"),
        DenseTensor::new(vec![batch, classes, height, width], logits).expect("finite logits"),
    )
}

/// Compares the analytic gradient against central differences
/// `(f(z + h) - f(z - h)) / 2h` at `probes` distinct logit coordinates drawn
/// from `seed`, with the loss evaluated in double-double arithmetic.
pub fn gradcheck(
    labels: &LabelBatch,
    logits: &DenseTensor,
    cfg: &LossConfig,
    probes: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    gradcheck_with(labels, logits, cfg, probes, step, seed, FdPrecision::DoubleDouble)
}

pub fn gradcheck_with(
    labels: &LabelBatch,
    logits: &DenseTensor,
    cfg: &LossConfig,
    probes: usize,
    step: f64,
    seed: u64,
    precision: FdPrecision,
) -> Result<GradCheckReport> {
    if probes == 0 {
        return Err(Error::config("probes", "need at least one probe"));
    }
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::config("step", format!("must lie in [1e-7, 1e-3], got {step}")));
    }
    let (report, mut tape) = forward_with_tape(labels, logits, cfg)?;
    let grad = tape.backward()?;

    let total = logits.len();
    let mut order: Vec<usize> = (0..total).collect();
    SplitMix64::new(seed).shuffle(&mut order);
    order.truncate(probes.min(total));

    let shape = logits.shape();
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = -1.0;
    let mut worst = 0;
    let extended = match precision {
        FdPrecision::DoubleDouble => Some(ExtendedObjective::new(labels, shape[1], cfg)?),
        FdPrecision::Native => None,
    };
    let mut perturbed = logits.data().to_vec();
    for &idx in &order {
        let fd = match &extended {
            Some(obj) => {
                let plus = obj.value(logits, Some((idx, step)))?;
                let minus = obj.value(logits, Some((idx, -step)))?;
                ((plus - minus) / (2.0 * step)).hi()
            }
            None => {
                let orig = perturbed[idx];
                perturbed[idx] = orig + step;
                let plus = loss_from_logits(labels, &DenseTensor::new(shape.to_vec(), perturbed.clone())?, cfg)?;
                perturbed[idx] = orig - step;
                let minus = loss_from_logits(labels, &DenseTensor::new(shape.to_vec(), perturbed.clone())?, cfg)?;
                perturbed[idx] = orig;
                (plus - minus) / (2.0 * step)
            }
        };
        let a = grad.data()[idx];
        let abs = (a - fd).abs();
        let rel = abs / a.abs().max(fd.abs()).max(1e-8);
        max_abs = max_abs.max(abs);
        if rel > max_rel {
            max_rel = rel;
            worst = idx;
        }
    }
    let hw = shape[2] * shape[3];
    let worst_coordinate = [worst / (shape[1] * hw), (worst / hw) % shape[1], (worst % hw) / shape[3], worst % shape[3]];
    Ok(GradCheckReport {
        loss: report.total,
        max_abs_err: max_abs,
        max_rel_err: max_rel.max(0.0),
        probe_count: order.len(),
        worst_coordinate,
        precision,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::{DownsampleConfig, PoolMode};

    fn default_cfg(lambda: f64) -> LossConfig {
        LossConfig {
            downsample: DownsampleConfig { factor: 2, mode: PoolMode::Average },
            lambda,
            ..LossConfig::default()
        }
    }

    #[test]
    fn pure_bce_is_exact() {
        let (l, z) = random_instance(2, 3, 24, 24, 1);
        let r = gradcheck(&l, &z, &default_cfg(1.0), 50, 1e-5, 2).unwrap();
        assert!(r.max_rel_err <= 1e-8, "{r:?}");
        assert_eq!(r.probe_count, 50);
        assert_eq!(r.precision, FdPrecision::DoubleDouble);
    }

    #[test]
    fn pure_bce_native_on_small_instance() {
        // few entries keep every gradient far above the ulp(f) / h floor
        let (l, z) = random_instance(1, 2, 6, 6, 1);
        let cfg = LossConfig { downsample: DownsampleConfig { factor: 1, mode: PoolMode::Average }, ..default_cfg(1.0) };
        let r = gradcheck_with(&l, &z, &cfg, 30, 1e-5, 2, FdPrecision::Native).unwrap();
        assert!(r.max_rel_err <= 1e-8, "{r:?}");
    }

    #[test]
    fn full_objective() {
        let (l, z) = random_instance(2, 3, 24, 24, 3);
        let r = gradcheck(&l, &z, &default_cfg(0.5), 50, 1e-5, 4).unwrap();
        assert!(r.max_rel_err <= 1e-6, "{r:?}");
        assert!(r.max_abs_err <= 1e-12, "{r:?}");
    }

    #[test]
    fn native_differences_sit_on_the_rounding_floor() {
        let (l, z) = random_instance(2, 3, 24, 24, 3);
        let native = gradcheck_with(&l, &z, &default_cfg(0.5), 50, 1e-5, 4, FdPrecision::Native).unwrap();
        let dd = gradcheck(&l, &z, &default_cfg(0.5), 50, 1e-5, 4).unwrap();
        // ulp(f) / h ~ 2e-11 at h = 1e-5
        assert!(native.max_abs_err <= 1e-10, "{native:?}");
        assert!(dd.max_abs_err * 10.0 < native.max_abs_err, "{dd:?} vs {native:?}");
        assert_eq!(native.loss, dd.loss);
    }

    #[test]
    fn precision_names() {
        assert_eq!("dd".parse::<FdPrecision>().unwrap(), FdPrecision::DoubleDouble);
        assert_eq!("f64".parse::<FdPrecision>().unwrap(), FdPrecision::Native);
        assert!("quad".parse::<FdPrecision>().is_err());
    }

    #[test]
    fn near_floor_predictions() {
        let (l, _) = random_instance(1, 2, 16, 16, 5);
        let mut rng = SplitMix64::new(6);
        let oh = crate::region::one_hot(&l, 2, None).unwrap();
        // probabilities within 1e-3 of the labels
        let z: Vec<f64> = oh
            .volume
            .data()
            .iter()
            .map(|&y| {
                let p: f64 = if y == 1.0 { 1.0 - 1e-3 * (0.5 + rng.next_f64()) } else { 1e-3 * (0.5 + rng.next_f64()) };
                (p / (1.0 - p)).ln()
            })
            .collect();
        let z = DenseTensor::new(vec![1, 2, 16, 16], z).unwrap();
        let r = gradcheck(&l, &z, &default_cfg(0.5), 40, 1e-5, 7).unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn deterministic_under_seed() {
        let (l, z) = random_instance(1, 2, 12, 12, 8);
        let a = gradcheck(&l, &z, &default_cfg(0.5), 10, 1e-5, 9).unwrap();
        let b = gradcheck(&l, &z, &default_cfg(0.5), 10, 1e-5, 9).unwrap();
        assert_eq!(a.max_rel_err.to_bits(), b.max_rel_err.to_bits());
        assert_eq!(a.worst_coordinate, b.worst_coordinate);
    }

    #[test]
    fn argument_validation() {
        let (l, z) = random_instance(1, 2, 8, 8, 10);
        assert!(gradcheck(&l, &z, &default_cfg(0.5), 0, 1e-5, 0).is_err());
        assert!(gradcheck(&l, &z, &default_cfg(0.5), 1, 1e-2, 0).is_err());
    }
}
