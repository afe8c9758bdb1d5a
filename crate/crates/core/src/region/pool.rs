//! Downsampling of single planes and the matching adjoints.
//!
//! Output size is `floor(H / DF) x floor(W / DF)`; trailing rows and columns
//! are dropped. Interpolation samples output cell `i` at the half-pixel
//! centre `(i + 0.5) * DF - 0.5`, clamped to the border. Nearest picks source
//! index `floor((i + 0.5) * DF)`.

use super::{DownsampleConfig, MapKind, PoolMode};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone)]
pub struct PooledPlane {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Source index of the selected element per output cell (max-pool only).
    pub argmax: Option<Vec<usize>>,
}

fn check_factor(height: usize, width: usize, cfg: DownsampleConfig) -> Result<(usize, usize)> {
    cfg.validate()?;
    if height < cfg.factor || width < cfg.factor {
        return Err(Error::FactorTooLarge { factor: cfg.factor, height, width });
    }
    Ok((height / cfg.factor, width / cfg.factor))
}

/// Two-tap linear interpolation weights along one axis.
pub(crate) fn linear_taps(i: usize, factor: usize, len: usize) -> (usize, usize, f64) {
    let centre = ((i as f64 + 0.5) * factor as f64 - 0.5).clamp(0.0, (len - 1) as f64);
    let lo = centre.floor() as usize;
    let hi = (lo + 1).min(len - 1);
    (lo, hi, centre - lo as f64)
}

fn nearest_index(i: usize, factor: usize, len: usize) -> usize {
    (((i as f64 + 0.5) * factor as f64).floor() as usize).min(len - 1)
}

pub fn downsample_plane(
    src: &[f64],
    height: usize,
    width: usize,
    cfg: DownsampleConfig,
    kind: MapKind,
) -> Result<PooledPlane> {
    if src.len() != height * width {
        return Err(Error::shape(&[height, width], &[src.len()]));
    }
    let (oh, ow) = check_factor(height, width, cfg)?;
    let f = cfg.factor;
    let mut values = vec![0.0; oh * ow];
    let mut argmax = None;
    match (cfg.mode, kind) {
        (PoolMode::Average, _) => {
            let inv = 1.0 / (f * f) as f64;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ky in 0..f {
                        let row = (oy * f + ky) * width + ox * f;
                        s += src[row..row + f].iter().sum::<f64>();
                    }
                    values[oy * ow + ox] = s * inv;
                }
            }
        }
        (PoolMode::Max, _) => {
            let mut idx = vec![0usize; oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (oy * f) * width + ox * f;
                    for ky in 0..f {
                        for kx in 0..f {
                            let k = (oy * f + ky) * width + ox * f + kx;
                            // strict > keeps the first maximum in row-major order
                            if src[k] > src[best] {
                                best = k;
                            }
                        }
                    }
                    idx[oy * ow + ox] = best;
                    values[oy * ow + ox] = src[best];
                }
            }
            argmax = Some(idx);
        }
        (PoolMode::Interpolate, MapKind::Label) => {
            for oy in 0..oh {
                let sy = nearest_index(oy, f, height);
                for ox in 0..ow {
                    values[oy * ow + ox] = src[sy * width + nearest_index(ox, f, width)];
                }
            }
        }
        (PoolMode::Interpolate, MapKind::Probability) => {
            for oy in 0..oh {
                let (y0, y1, wy) = linear_taps(oy, f, height);
                for ox in 0..ow {
                    let (x0, x1, wx) = linear_taps(ox, f, width);
                    let top = (1.0 - wx) * src[y0 * width + x0] + wx * src[y0 * width + x1];
                    let bottom = (1.0 - wx) * src[y1 * width + x0] + wx * src[y1 * width + x1];
                    values[oy * ow + ox] = (1.0 - wy) * top + wy * bottom;
                }
            }
        }
    }
    Ok(PooledPlane { height: oh, width: ow, values, argmax })
}

/// Adjoint of [`downsample_plane`]: maps a gradient on the pooled plane back
/// to the source plane. Average pooling spreads `1 / DF^2`, max pooling routes
/// to the recorded argmax, interpolation transposes its weights.
pub fn downsample_plane_backward(
    grad: &[f64],
    pooled: &PooledPlane,
    height: usize,
    width: usize,
    cfg: DownsampleConfig,
    kind: MapKind,
) -> Vec<f64> {
    let (oh, ow) = (pooled.height, pooled.width);
    debug_assert_eq!(grad.len(), oh * ow);
    let f = cfg.factor;
    let mut out = vec![0.0; height * width];
    match (cfg.mode, kind) {
        (PoolMode::Average, _) => {
            let inv = 1.0 / (f * f) as f64;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = grad[oy * ow + ox] * inv;
                    for ky in 0..f {
                        let row = (oy * f + ky) * width + ox * f;
                        for v in &mut out[row..row + f] {
                            *v += g;
                        }
                    }
                }
            }
        }
        (PoolMode::Max, _) => {
            let idx = pooled.argmax.as_ref().expect("max-pool plane records argmax");
            for (k, &src) in idx.iter().enumerate() {
                out[src] += grad[k];
            }
        }
        (PoolMode::Interpolate, MapKind::Label) => {
            for oy in 0..oh {
                let sy = nearest_index(oy, f, height);
                for ox in 0..ow {
                    out[sy * width + nearest_index(ox, f, width)] += grad[oy * ow + ox];
                }
            }
        }
        (PoolMode::Interpolate, MapKind::Probability) => {
            for oy in 0..oh {
                let (y0, y1, wy) = linear_taps(oy, f, height);
                for ox in 0..ow {
                    let (x0, x1, wx) = linear_taps(ox, f, width);
                    let g = grad[oy * ow + ox];
                    out[y0 * width + x0] += (1.0 - wy) * (1.0 - wx) * g;
                    out[y0 * width + x1] += (1.0 - wy) * wx * g;
                    out[y1 * width + x0] += wy * (1.0 - wx) * g;
                    out[y1 * width + x1] += wy * wx * g;
                }
            }
        }
    }
    out
}

/// Pooled cells whose `DF x DF` source block contains an ignored pixel. Every
/// mode only reads from inside that block, so such cells carry undefined
/// label mass.
pub fn masked_cells(ignore: &[bool], height: usize, width: usize, factor: usize) -> Vec<bool> {
    let (oh, ow) = (height / factor, width / factor);
    let mut out = vec![false; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..factor).any(|ky| {
                let row = (oy * factor + ky) * width + ox * factor;
                ignore[row..row + factor].iter().any(|&m| m)
            });
        }
    }
    out
}

/// Downsamples every plane of a `B x C x H x W` volume.
pub fn downsample(volume: &DenseTensor, cfg: DownsampleConfig, kind: MapKind) -> Result<DenseTensor> {
    let &[b, c, h, w] = volume.shape() else {
        return Err(Error::shape(&[0, 0, 0, 0], volume.shape()));
    };
    let (oh, ow) = check_factor(h, w, cfg)?;
    let mut data = Vec::with_capacity(b * c * oh * ow);
    for plane in volume.data().chunks_exact(h * w) {
        data.extend(downsample_plane(plane, h, w, cfg, kind)?.values);
    }
    DenseTensor::new(vec![b, c, oh, ow], data)
}
