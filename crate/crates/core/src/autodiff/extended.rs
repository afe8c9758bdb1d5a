//! The training objective evaluated in double-double arithmetic.
//!
//! Central differences of the `f64` loss carry about `ulp(f) / h` of
//! rounding noise. Evaluating the same objective with ~106-bit intermediates
//! pushes that noise far below the truncation error, so the differences can
//! resolve gradient entries many orders of magnitude smaller than `f`.
//!
//! Everything that depends only on the labels (one-hot planes, pooled label
//! maps, kept window origins, label means) is shared with the `f64` path;
//! the probability path from the logits to the loss is re-derived here.

use twofloat::TwoFloat;

use super::{LossConfig, BCE_CLAMP};
use crate::error::{Error, Result};
use crate::region::{label_layout, linear_taps, one_hot, LabelBatch, LabelLayout, PoolMode};
use crate::tensor::DenseTensor;

type Dd = TwoFloat;

/// `a / b` by three rounds of long division. The `twofloat` quotient of two
/// double-doubles is only accurate to about one `f64` ulp.
fn div(a: Dd, b: Dd) -> Dd {
    let q1 = a.hi() / b.hi();
    let r = a - b * q1;
    let q2 = r.hi() / b.hi();
    let r = r - b * q2;
    let q3 = r.hi() / b.hi();
    Dd::new_add(q1, q2) + q3
}

/// `e^x - 1` for `|x| <= ln(2) / 2`: Taylor series on `x / 2^10`, then ten
/// doublings `u -> 2u + u^2` of `u = e^t - 1`.
fn expm1_reduced(x: Dd) -> Dd {
    let t = x / 1024.0;
    let mut term = t;
    let mut u = t;
    for n in 2..=10 {
        term = term * t / n as f64;
        u += term;
    }
    for _ in 0..10 {
        u = u * 2.0 + u * u;
    }
    u
}

/// `e^x` to full double-double accuracy; the `twofloat` version is only
/// accurate to about one `f64` ulp.
fn exp(x: Dd) -> Dd {
    if x.hi() < -700.0 {
        return Dd::from(0.0);
    }
    let k = (x.hi() / twofloat::consts::LN_2.hi()).round();
    let r = x - twofloat::consts::LN_2 * k;
    (expm1_reduced(r) + 1.0) * 2f64.powi(k as i32)
}

/// Natural log by one Newton step on [`exp`] from the `f64` logarithm.
fn ln(x: Dd) -> Dd {
    let y = Dd::from(x.hi().ln());
    y + (x * exp(-y) - 1.0)
}

fn sigmoid(z: Dd) -> Dd {
    if z.hi() >= 0.0 {
        div(Dd::from(1.0), exp(-z) + 1.0)
    } else {
        let e = exp(z);
        div(e, e + 1.0)
    }
}

fn bce_entry(y: f64, p: Dd) -> Dd {
    let p = if p < BCE_CLAMP {
        Dd::from(BCE_CLAMP)
    } else if p > 1.0 - BCE_CLAMP {
        Dd::from(1.0 - BCE_CLAMP)
    } else {
        p
    };
    let q = -p + 1.0;
    if y == 1.0 {
        -ln(p)
    } else if y == 0.0 {
        -ln(q)
    } else {
        -(ln(p) * y + ln(q) * (1.0 - y))
    }
}

/// Lower Cholesky factor of a row-major `d x d` matrix.
fn cholesky(a: &[Dd], d: usize) -> Result<Vec<Dd>> {
    let mut l = vec![Dd::from(0.0); d * d];
    for j in 0..d {
        let mut s = a[j * d + j];
        for k in 0..j {
            s -= l[j * d + k] * l[j * d + k];
        }
        if !(s.hi() > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: j, value: s.hi() });
        }
        let ljj = s.sqrt();
        l[j * d + j] = ljj;
        for i in j + 1..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = div(s, ljj);
        }
    }
    Ok(l)
}

/// Solves `L L^T X = B` in place for `B` row-major `d x cols`.
fn cholesky_solve(l: &[Dd], d: usize, b: &mut [Dd], cols: usize) {
    for c in 0..cols {
        for i in 0..d {
            let mut s = b[i * cols + c];
            for k in 0..i {
                s -= l[i * d + k] * b[k * cols + c];
            }
            b[i * cols + c] = div(s, l[i * d + i]);
        }
        for i in (0..d).rev() {
            let mut s = b[i * cols + c];
            for k in i + 1..d {
                s -= l[k * d + i] * b[k * cols + c];
            }
            b[i * cols + c] = div(s, l[i * d + i]);
        }
    }
}

/// `A B^T / n` for row-major `d x n` inputs.
fn second_moment(a: &[Dd], b: &[Dd], d: usize, n: usize) -> Vec<Dd> {
    let mut out = vec![Dd::from(0.0); d * d];
    for i in 0..d {
        let ra = &a[i * n..(i + 1) * n];
        for j in 0..d {
            let rb = &b[j * n..(j + 1) * n];
            let mut s = Dd::from(0.0);
            for (x, y) in ra.iter().zip(rb) {
                s += *x * *y;
            }
            out[i * d + j] = s / n as f64;
        }
    }
    out
}

fn center(points: &mut [Dd], d: usize, n: usize) {
    for row in points.chunks_exact_mut(n).take(d) {
        let mut s = Dd::from(0.0);
        for v in row.iter() {
            s += *v;
        }
        let mean = s / n as f64;
        for v in row.iter_mut() {
            *v -= mean;
        }
    }
}

/// Label-side state shared by every evaluation on one label batch.
pub struct ExtendedObjective {
    cfg: LossConfig,
    shape: [usize; 4],
    onehot: Vec<f64>,
    ignore: Vec<bool>,
    bce_count: usize,
    layout: LabelLayout,
    /// Centered label points per (b, c), row-major `d x N_b`.
    centered_y: Vec<Vec<Dd>>,
}

impl ExtendedObjective {
    pub fn new(labels: &LabelBatch, classes: usize, cfg: &LossConfig) -> Result<Self> {
        cfg.validate()?;
        let oh = one_hot(labels, classes, cfg.ignore_index)?;
        let layout = label_layout(labels, classes, cfg.ignore_index, cfg.downsample, cfg.region)?;
        let [h, w] = [labels.height, labels.width];
        let hw = h * w;
        let bce_count = oh.ignore_mask.iter().filter(|&&m| !m).count() * classes;
        let (side, gw) = (cfg.region.side, layout.geometry.width);
        let d = side * side;
        let mut centered_y = Vec::with_capacity(labels.batch * classes);
        for b in 0..labels.batch {
            let origins = &layout.origins[b];
            for c in 0..classes {
                let plane = &layout.pooled_labels[b * classes + c];
                let mut pts = gather(origins, side, |k| Dd::from(plane[k]), gw);
                center(&mut pts, d, origins.len());
                centered_y.push(pts);
            }
        }
        debug_assert_eq!(oh.volume.len(), labels.batch * classes * hw);
        Ok(Self {
            cfg: *cfg,
            shape: [labels.batch, classes, h, w],
            onehot: oh.volume.into_data(),
            ignore: oh.ignore_mask,
            bce_count,
            layout,
            centered_y,
        })
    }

    /// Loss at `logits`, with `shift = Some((index, delta))` adding `delta`
    /// to one logit exactly.
    pub fn value(&self, logits: &DenseTensor, shift: Option<(usize, f64)>) -> Result<Dd> {
        if logits.shape() != self.shape {
            return Err(Error::shape(&self.shape, logits.shape()));
        }
        let [b_total, c_total, h, w] = self.shape;
        let hw = h * w;
        let cfg = &self.cfg;
        let probs: Vec<Dd> = logits
            .data()
            .iter()
            .enumerate()
            .map(|(i, &z)| {
                let z = match shift {
                    Some((k, delta)) if k == i => Dd::from(z) + delta,
                    _ => Dd::from(z),
                };
                sigmoid(z)
            })
            .collect();

        let mut bce = Dd::from(0.0);
        for (idx, &p) in probs.iter().enumerate() {
            let pixel = (idx / (c_total * hw)) * hw + idx % hw;
            if !self.ignore[pixel] {
                bce += bce_entry(self.onehot[idx], p);
            }
        }
        if self.bce_count > 0 {
            bce /= self.bce_count as f64;
        }

        let (side, gw) = (cfg.region.side, self.layout.geometry.width);
        let d = side * side;
        let mut rmi = Dd::from(0.0);
        for b in 0..b_total {
            let origins = &self.layout.origins[b];
            let n = origins.len();
            for c in 0..c_total {
                let start = (b * c_total + c) * hw;
                let pooled = self.pool(&probs[start..start + hw], h, w);
                let mut pc = gather(origins, side, |k| pooled[k], gw);
                center(&mut pc, d, n);
                rmi -= self.lower_bound(&self.centered_y[b * c_total + c], &pc, d, n)?;
            }
        }
        rmi /= b_total as f64;
        Ok(bce * cfg.lambda + rmi * (1.0 - cfg.lambda))
    }

    fn pool(&self, src: &[Dd], height: usize, width: usize) -> Vec<Dd> {
        let f = self.cfg.downsample.factor;
        let (oh, ow) = (height / f, width / f);
        let mut out = vec![Dd::from(0.0); oh * ow];
        match self.cfg.downsample.mode {
            PoolMode::Average => {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = Dd::from(0.0);
                        for ky in 0..f {
                            for kx in 0..f {
                                s += src[(oy * f + ky) * width + ox * f + kx];
                            }
                        }
                        out[oy * ow + ox] = s / (f * f) as f64;
                    }
                }
            }
            PoolMode::Max => {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = src[(oy * f) * width + ox * f];
                        for ky in 0..f {
                            for kx in 0..f {
                                let v = src[(oy * f + ky) * width + ox * f + kx];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        out[oy * ow + ox] = best;
                    }
                }
            }
            PoolMode::Interpolate => {
                for oy in 0..oh {
                    let (y0, y1, wy) = linear_taps(oy, f, height);
                    for ox in 0..ow {
                        let (x0, x1, wx) = linear_taps(ox, f, width);
                        let top = src[y0 * width + x0] * (1.0 - wx) + src[y0 * width + x1] * wx;
                        let bottom = src[y1 * width + x0] * (1.0 - wx) + src[y1 * width + x1] * wx;
                        out[oy * ow + ox] = top * (1.0 - wy) + bottom * wy;
                    }
                }
            }
        }
        out
    }

    /// `I_l = -logdet(Var(Yc - A Pc) + xi I) / (2d)`.
    fn lower_bound(&self, yc: &[Dd], pc: &[Dd], d: usize, n: usize) -> Result<Dd> {
        let rmi = &self.cfg.rmi;
        let mut s = second_moment(pc, pc, d, n);
        for i in 0..d {
            s[i * d + i] += rmi.sigma_p_ridge;
        }
        let ls = cholesky(&s, d)?;
        // K = S^{-1} C^T with C^T = Pc Yc^T / N
        let mut k = second_moment(pc, yc, d, n);
        cholesky_solve(&ls, d, &mut k, d);
        let mut r = yc.to_vec();
        for kk in 0..d {
            let prow = &pc[kk * n..(kk + 1) * n];
            for i in 0..d {
                let a = k[kk * d + i];
                for (rv, pv) in r[i * n..(i + 1) * n].iter_mut().zip(prow) {
                    *rv -= a * *pv;
                }
            }
        }
        let mut m = second_moment(&r, &r, d, n);
        for i in 0..d {
            for j in 0..i {
                m[j * d + i] = m[i * d + j];
            }
            m[i * d + i] += rmi.xi;
        }
        let l = cholesky(&m, d)?;
        let mut logdet = Dd::from(0.0);
        for i in 0..d {
            logdet += ln(l[i * d + i]);
        }
        Ok(-logdet / d as f64)
    }
}

fn gather(origins: &[(usize, usize)], side: usize, mut at: impl FnMut(usize) -> Dd, width: usize) -> Vec<Dd> {
    let count = origins.len();
    let mut data = vec![Dd::from(0.0); side * side * count];
    for (j, &(oy, ox)) in origins.iter().enumerate() {
        for ky in 0..side {
            for kx in 0..side {
                data[(ky * side + kx) * count + j] = at((oy + ky) * width + ox + kx);
            }
        }
    }
    data
}
