//! Synthetic grayscale shapes for segmentation: background, disk, rectangle
//! and triangle, with per-shape intensity jitter and additive Gaussian noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::LabelBatch;
use crate::rng::SplitMix64;
use crate::tensor::DenseTensor;

pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "disk", "rectangle", "triangle"];

/// Mean intensity per class before jitter.
const BASE_INTENSITY: [f64; NUM_CLASSES] = [0.0, 0.4, 0.65, 0.9];
const MAX_PLACEMENT_TRIES: usize = 64;
const MAX_REGENERATIONS: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapesOptions {
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
    /// Half-width of the uniform per-shape intensity jitter.
    pub jitter: f64,
}

impl Default for ShapesOptions {
    fn default() -> Self {
        Self { noise: 0.1, jitter: 0.08 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    /// 70 / 10 / 20 percent, rounding towards train.
    pub fn proportional(count: usize) -> Self {
        let test = count / 5;
        let val = count / 10;
        Self { train: count - test - val, val, test }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::config("split", format!("expected train, val or test, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapesDataset {
    pub height: usize,
    pub width: usize,
    /// `count x H x W` intensities (one channel).
    pub images: Vec<f64>,
    /// `count x H x W` class indices.
    pub labels: Vec<u32>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Seed the dataset was finally generated from (after any regeneration).
    pub seed: u64,
}

impl ShapesDataset {
    pub fn len(&self) -> usize {
        self.labels.len() / (self.height * self.width)
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let hw = self.pixels();
        &self.images[i * hw..(i + 1) * hw]
    }

    pub fn label(&self, i: usize) -> &[u32] {
        let hw = self.pixels();
        &self.labels[i * hw..(i + 1) * hw]
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Images and labels of `indices`, optionally mirrored left-right.
    pub fn batch(&self, indices: &[usize], flips: &[bool]) -> Result<(DenseTensor, LabelBatch)> {
        let (h, w) = (self.height, self.width);
        let mut img = Vec::with_capacity(indices.len() * h * w);
        let mut lab = Vec::with_capacity(indices.len() * h * w);
        for (k, &i) in indices.iter().enumerate() {
            let flip = flips.get(k).copied().unwrap_or(false);
            let (src_i, src_l) = (self.image(i), self.label(i));
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { w - 1 - x } else { x };
                    img.push(src_i[y * w + sx]);
                    lab.push(src_l[y * w + sx]);
                }
            }
        }
        let n = indices.len();
        Ok((DenseTensor::new(vec![n, 1, h, w], img)?, LabelBatch::new(n, h, w, lab)?))
    }

    /// Number of images in `split` that contain each class.
    pub fn class_image_counts(&self, split: Split) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &i in self.split(split) {
            let mut seen = [false; NUM_CLASSES];
            for &l in self.label(i) {
                seen[l as usize] = true;
            }
            for (c, s) in seen.iter().enumerate() {
                counts[c] += usize::from(*s);
            }
        }
        counts
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Triangle { a: (f64, f64), b: (f64, f64), c: (f64, f64) },
}

impl Shape {
    fn class(&self) -> u32 {
        match self {
            Shape::Disk { .. } => 1,
            Shape::Rect { .. } => 2,
            Shape::Triangle { .. } => 3,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Triangle { a, b, c } => {
                let edge = |p: (f64, f64), q: (f64, f64)| (q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0);
                let (e0, e1, e2) = (edge(a, b), edge(b, c), edge(c, a));
                (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
            }
        }
    }

    fn random(rng: &mut SplitMix64, h: usize, w: usize) -> Self {
        let s = h.min(w) as f64;
        let (wf, hf) = (w as f64, h as f64);
        match rng.below(3) {
            0 => {
                let r = rng.uniform(s / 12.0, s / 6.0);
                Shape::Disk { cx: rng.uniform(r, wf - r), cy: rng.uniform(r, hf - r), r }
            }
            1 => {
                let (rw, rh) = (rng.uniform(s / 6.0, s / 3.0), rng.uniform(s / 6.0, s / 3.0));
                let (x0, y0) = (rng.uniform(0.0, wf - rw), rng.uniform(0.0, hf - rh));
                Shape::Rect { x0, y0, x1: x0 + rw, y1: y0 + rh }
            }
            _ => {
                let (base, height) = (rng.uniform(s / 5.0, s / 2.5), rng.uniform(s / 5.0, s / 2.5));
                let (x0, y0) = (rng.uniform(0.0, wf - base), rng.uniform(0.0, hf - height));
                let apex = x0 + rng.uniform(0.0, base);
                Shape::Triangle { a: (x0, y0 + height), b: (x0 + base, y0 + height), c: (apex, y0) }
            }
        }
    }
}

/// Rasterize 1 to 3 non-overlapping shapes into one image.
fn render(rng: &mut SplitMix64, h: usize, w: usize, opts: &ShapesOptions, img: &mut [f64], lab: &mut [u32]) {
    lab.fill(0);
    let mut intensity = [0.0; NUM_CLASSES];
    let wanted = 1 + rng.below(3);
    let mut placed = 0;
    let mut shape_mask = vec![false; h * w];
    for _ in 0..MAX_PLACEMENT_TRIES {
        if placed == wanted {
            break;
        }
        let shape = Shape::random(rng, h, w);
        shape_mask.fill(false);
        let mut clash = false;
        let mut any = false;
        for y in 0..h {
            for x in 0..w {
                if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    shape_mask[y * w + x] = true;
                    any = true;
                    // keep a one-pixel gap to existing shapes
                    let (ylo, yhi, xlo, xhi) = (y.saturating_sub(1), (y + 1).min(h - 1), x.saturating_sub(1), (x + 1).min(w - 1));
                    for yy in ylo..=yhi {
                        for xx in xlo..=xhi {
                            clash |= lab[yy * w + xx] != 0;
                        }
                    }
                }
            }
        }
        if clash || !any {
            continue;
        }
        for (l, &m) in lab.iter_mut().zip(&shape_mask) {
            if m {
                *l = shape.class();
            }
        }
        placed += 1;
    }
    let shape_level = |c: usize, rng: &mut SplitMix64| BASE_INTENSITY[c] + rng.uniform(-opts.jitter, opts.jitter);
    // one level per class per image; shapes of the same class share it
    for (c, v) in intensity.iter_mut().enumerate() {
        *v = shape_level(c, rng);
    }
    for (px, &l) in img.iter_mut().zip(lab.iter()) {
        let noise = if opts.noise > 0.0 { opts.noise * rng.next_normal() } else { 0.0 };
        *px = intensity[l as usize] + noise;
    }
}

pub fn generate_shapes(count: usize, height: usize, width: usize, seed: u64) -> Result<ShapesDataset> {
    generate_shapes_with(SplitSizes::proportional(count), height, width, seed, &ShapesOptions::default())
}

/// Generate a dataset, regenerating from a derived seed until every
/// non-empty split contains every class.
pub fn generate_shapes_with(
    sizes: SplitSizes,
    height: usize,
    width: usize,
    seed: u64,
    opts: &ShapesOptions,
) -> Result<ShapesDataset> {
    if height < 32 || width < 32 {
        return Err(Error::config("height/width", format!("shapes need at least 32x32, got {height}x{width}")));
    }
    if !(opts.noise >= 0.0 && opts.noise.is_finite()) || !(opts.jitter >= 0.0 && opts.jitter.is_finite()) {
        return Err(Error::config("noise/jitter", "must be finite and non-negative"));
    }
    if sizes.total() == 0 {
        return Err(Error::config("count", "dataset must contain at least one image"));
    }
    let mut attempt_seed = seed;
    for attempt in 0..MAX_REGENERATIONS {
        let ds = render_dataset(sizes, height, width, attempt_seed, opts);
        let ok = [Split::Train, Split::Val, Split::Test]
            .iter()
            .all(|&s| ds.split(s).is_empty() || ds.class_image_counts(s).iter().all(|&n| n > 0));
        if ok {
            return Ok(ds);
        }
        attempt_seed = seed.wrapping_add((attempt + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    }
    Err(Error::config("count", "could not cover every class in every split; use larger splits"))
}

fn render_dataset(sizes: SplitSizes, h: usize, w: usize, seed: u64, opts: &ShapesOptions) -> ShapesDataset {
    let count = sizes.total();
    let hw = h * w;
    let mut rng = SplitMix64::new(seed);
    let mut images = vec![0.0; count * hw];
    let mut labels = vec![0; count * hw];
    for (img, lab) in images.chunks_exact_mut(hw).zip(labels.chunks_exact_mut(hw)) {
        let mut local = rng.fork();
        render(&mut local, h, w, opts, img, lab);
    }
    let train = (0..sizes.train).collect();
    let val = (sizes.train..sizes.train + sizes.val).collect();
    let test = (sizes.train + sizes.val..count).collect();
    ShapesDataset { height: h, width: w, images, labels, train, val, test, seed }
}
