//! Three 3x3 convolutions (same padding) with ReLU in between, producing
//! full-resolution logits. Convolutions run as im2col + GEMM.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::DenseTensor;

pub const DEFAULT_WIDTHS: [usize; 2] = [16, 32];
const K: usize = 3;
const KK: usize = K * K;

/// `C = alpha * op(A) * op(B) + beta * C`, row-major, `op(A)` is `m x k`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe row-major (or
    // transposed row-major) views that stay inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `(cin * 9) x (h * w)` patch matrix with zero padding.
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, col: &mut [f64]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut col[((ci * KK) + ky * K + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - 1;
                        *o = if sx < 0 || sx >= w as isize { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients into `dx`.
fn col2im(col: &[f64], cin: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    dx.fill(0.0);
    for ci in 0..cin {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &col[((ci * KK) + ky * K + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    /// `cout x cin x 3 x 3`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn new(cin: usize, cout: usize, rng: &mut SplitMix64) -> Self {
        let std = (2.0 / (cin * KK) as f64).sqrt();
        let weight = (0..cout * cin * KK).map(|_| std * rng.next_normal()).collect();
        Self { cin, cout, weight, bias: vec![0.0; cout] }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Per-layer gradients, same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    pub layers: Vec<Conv2d>,
}

/// Activations kept by [`ConvNet::forward`] for the backward pass.
pub struct ForwardCache {
    h: usize,
    w: usize,
    batch: usize,
    /// Per image, per layer: patch matrix of the layer input.
    cols: Vec<Vec<Vec<f64>>>,
    /// Per image, per hidden layer: pre-activation sign.
    active: Vec<Vec<Vec<bool>>>,
}

impl ConvNet {
    pub fn new(in_channels: usize, num_classes: usize, seed: u64) -> Self {
        Self::with_widths(in_channels, &DEFAULT_WIDTHS, num_classes, seed)
    }

    pub fn with_widths(in_channels: usize, widths: &[usize], num_classes: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut chans = vec![in_channels];
        chans.extend_from_slice(widths);
        chans.push(num_classes);
        let layers = chans.windows(2).map(|p| Conv2d::new(p[0], p[1], &mut rng)).collect();
        Self { layers }
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].cin
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.cout)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Conv2d::param_count).sum()
    }

    pub fn zero_grads(&self) -> Vec<ConvGrad> {
        self.layers
            .iter()
            .map(|l| ConvGrad { weight: vec![0.0; l.weight.len()], bias: vec![0.0; l.bias.len()] })
            .collect()
    }

    fn check_input(&self, x: &DenseTensor) -> Result<[usize; 4]> {
        match *x.shape() {
            [b, c, h, w] if c == self.in_channels() && b > 0 && h > 0 && w > 0 => Ok([b, c, h, w]),
            _ => Err(Error::ShapeMismatch { expected: vec![0, self.in_channels(), 0, 0], actual: x.shape().to_vec() }),
        }
    }

    /// Logits `B x C x H x W`.
    pub fn predict(&self, x: &DenseTensor) -> Result<DenseTensor> {
        self.run(x, false).map(|(y, _)| y)
    }

    pub fn forward(&self, x: &DenseTensor) -> Result<(DenseTensor, ForwardCache)> {
        self.run(x, true)
    }

    fn run(&self, x: &DenseTensor, keep: bool) -> Result<(DenseTensor, ForwardCache)> {
        let [b, cin, h, w] = self.check_input(x)?;
        let hw = h * w;
        let last = self.layers.len() - 1;
        let (mut cols, mut active) = (Vec::new(), Vec::new());
        let mut out = Vec::with_capacity(b * self.num_classes() * hw);
        for img in x.data().chunks_exact(cin * hw) {
            let mut act = img.to_vec();
            let (mut img_cols, mut img_active) = (Vec::new(), Vec::new());
            for (li, layer) in self.layers.iter().enumerate() {
                let mut col = vec![0.0; layer.cin * KK * hw];
                im2col(&act, layer.cin, h, w, &mut col);
                let mut z: Vec<f64> = layer.bias.iter().flat_map(|&bv| std::iter::repeat(bv).take(hw)).collect();
                gemm(layer.cout, layer.cin * KK, hw, &layer.weight, false, &col, false, 1.0, &mut z);
                if li < last {
                    if keep {
                        img_active.push(z.iter().map(|&v| v > 0.0).collect());
                    }
                    for v in &mut z {
                        *v = v.max(0.0);
                    }
                }
                if keep {
                    img_cols.push(col);
                }
                act = z;
            }
            out.extend_from_slice(&act);
            if keep {
                cols.push(img_cols);
                active.push(img_active);
            }
        }
        let y = DenseTensor::new(vec![b, self.num_classes(), h, w], out)?;
        Ok((y, ForwardCache { h, w, batch: b, cols, active }))
    }

    /// Parameter gradients for `dlogits` (same shape as the logits).
    pub fn backward(&self, cache: &ForwardCache, dlogits: &DenseTensor) -> Result<Vec<ConvGrad>> {
        let (h, w) = (cache.h, cache.w);
        let hw = h * w;
        let expected = [cache.batch, self.num_classes(), h, w];
        if dlogits.shape() != expected {
            return Err(Error::shape(&expected, dlogits.shape()));
        }
        if cache.cols.len() != cache.batch {
            return Err(Error::config("cache", "forward was run without keeping activations"));
        }
        let mut grads = self.zero_grads();
        for (bi, dimg) in dlogits.data().chunks_exact(self.num_classes() * hw).enumerate() {
            let mut dz = dimg.to_vec();
            for li in (0..self.layers.len()).rev() {
                let layer = &self.layers[li];
                let col = &cache.cols[bi][li];
                let g = &mut grads[li];
                gemm(layer.cout, hw, layer.cin * KK, &dz, false, col, true, 1.0, &mut g.weight);
                for (gb, row) in g.bias.iter_mut().zip(dz.chunks_exact(hw)) {
                    *gb += row.iter().sum::<f64>();
                }
                if li == 0 {
                    break;
                }
                let mut dcol = vec![0.0; layer.cin * KK * hw];
                gemm(layer.cin * KK, layer.cout, hw, &layer.weight, true, &dz, false, 0.0, &mut dcol);
                let mut dx = vec![0.0; layer.cin * hw];
                col2im(&dcol, layer.cin, h, w, &mut dx);
                for (v, &on) in dx.iter_mut().zip(&cache.active[bi][li - 1]) {
                    if !on {
                        *v = 0.0;
                    }
                }
                dz = dx;
            }
        }
        Ok(grads)
    }
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<ConvGrad>,
}

impl Sgd {
    pub fn new(net: &ConvNet, momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: net.zero_grads() }
    }

    pub fn step(&mut self, net: &mut ConvNet, grads: &[ConvGrad], lr: f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        for ((layer, g), v) in net.layers.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((p, &gi), vi) in layer.weight.iter_mut().zip(&g.weight).zip(&mut v.weight) {
                *vi = mu * *vi + gi + wd * *p;
                *p -= lr * *vi;
            }
            for ((p, &gi), vi) in layer.bias.iter_mut().zip(&g.bias).zip(&mut v.bias) {
                *vi = mu * *vi + gi;
                *p -= lr * *vi;
            }
        }
    }
}
