//! Label/probability volumes to per-(image, class) region point clouds.
//!
//! A probability channel `H x W` is downsampled to `H' x W'`, then every
//! valid `R x R` window becomes one column of a `d x N` matrix with
//! `d = R * R`. The one-hot label channel goes through the same two steps,
//! and the pair of matrices is a [`RegionDistribution`].

mod pgm;
mod pool;

pub use pgm::{read_pgm_stack, write_pgm_stack};
pub use pool::{downsample, downsample_plane, downsample_plane_backward, masked_cells, PooledPlane};
pub(crate) use pool::linear_taps;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Ground-truth class indices, `B x H x W`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
}

impl LabelBatch {
    pub fn new(batch: usize, height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != batch * height * width {
            return Err(Error::shape(&[batch, height, width], &[data.len()]));
        }
        Ok(Self { batch, height, width, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.batch, self.height, self.width]
    }

    pub fn image(&self, b: usize) -> &[u32] {
        let hw = self.height * self.width;
        &self.data[b * hw..(b + 1) * hw]
    }

    /// Converts an integer-valued tensor of shape `[B, H, W]` (or `[H, W]`).
    pub fn from_tensor(t: &DenseTensor) -> Result<Self> {
        let (b, h, w) = match *t.shape() {
            [h, w] => (1, h, w),
            [b, h, w] => (b, h, w),
            _ => return Err(Error::shape(&[0, 0, 0], t.shape())),
        };
        let data = t
            .data()
            .iter()
            .map(|&v| {
                if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                    Err(Error::Format { format: "label tensor", reason: format!("non-label value {v}") })
                } else {
                    Ok(v as u32)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(b, h, w, data)
    }
}

/// Labels plus predicted probabilities `B x C x H x W` for a mini-batch.
#[derive(Debug, Clone)]
pub struct SegmentationBatch {
    labels: LabelBatch,
    probs: DenseTensor,
    num_classes: usize,
    ignore_index: Option<u32>,
}

impl SegmentationBatch {
    pub fn new(labels: LabelBatch, probs: DenseTensor, ignore_index: Option<u32>) -> Result<Self> {
        let &[b, c, h, w] = probs.shape() else {
            return Err(Error::shape(&[labels.batch, 0, labels.height, labels.width], probs.shape()));
        };
        if [b, h, w] != labels.shape() {
            return Err(Error::shape(&[labels.batch, c, labels.height, labels.width], probs.shape()));
        }
        if let Some(i) = probs.data().iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Format {
                format: "probability volume",
                reason: format!("value {} at flat index {i} is outside [0, 1]", probs.data()[i]),
            });
        }
        check_labels(&labels, c, ignore_index)?;
        Ok(Self { labels, probs, num_classes: c, ignore_index })
    }

    pub fn labels(&self) -> &LabelBatch {
        &self.labels
    }

    pub fn probs(&self) -> &DenseTensor {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ignore_index(&self) -> Option<u32> {
        self.ignore_index
    }

    pub fn batch_size(&self) -> usize {
        self.labels.batch
    }

    /// Probability plane for image `b`, class `c`.
    pub fn prob_plane(&self, b: usize, c: usize) -> &[f64] {
        let hw = self.labels.height * self.labels.width;
        let start = (b * self.num_classes + c) * hw;
        &self.probs.data()[start..start + hw]
    }
}

fn check_labels(labels: &LabelBatch, num_classes: usize, ignore: Option<u32>) -> Result<()> {
    for (index, &l) in labels.data.iter().enumerate() {
        if Some(l) != ignore && l as usize >= num_classes {
            return Err(Error::ClassOutOfRange { label: l as i64, index, num_classes });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[serde(rename = "avg")]
    Average,
    Max,
    #[serde(rename = "interp")]
    Interpolate,
}

impl std::str::FromStr for PoolMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "avg" => Ok(PoolMode::Average),
            "max" => Ok(PoolMode::Max),
            "interp" => Ok(PoolMode::Interpolate),
            other => Err(format!("unknown pool mode `{other}` (expected avg, max or interp)")),
        }
    }
}

/// Which interpolation rule applies in [`PoolMode::Interpolate`]: nearest for
/// labels, bilinear for probabilities. Pooling modes ignore it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Label,
    Probability,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DownsampleConfig {
    pub factor: usize,
    pub mode: PoolMode,
}

impl Default for DownsampleConfig {
    fn default() -> Self {
        Self { factor: 4, mode: PoolMode::Average }
    }
}

impl DownsampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.factor == 0 {
            return Err(Error::config("df", "downsample factor must be >= 1"));
        }
        Ok(())
    }
}

/// Window geometry for unfolding. `stride = 1` gives dense overlapping windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionConfig {
    pub side: usize,
    pub stride: usize,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self { side: 3, stride: 1 }
    }
}

impl RegionConfig {
    pub fn with_side(side: usize) -> Self {
        Self { side, ..Self::default() }
    }

    pub fn dim(&self) -> usize {
        self.side * self.side
    }

    pub fn validate(&self) -> Result<()> {
        if self.side == 0 {
            return Err(Error::config("region-side", "region side must be >= 1"));
        }
        if self.stride == 0 {
            return Err(Error::config("region-stride", "stride must be >= 1"));
        }
        Ok(())
    }

    /// Number of window positions along an axis of length `len`.
    pub fn positions(&self, len: usize) -> usize {
        if len < self.side {
            0
        } else {
            (len - self.side) / self.stride + 1
        }
    }
}

/// One-hot labels with the ignore mask (`true` = ignored pixel).
#[derive(Debug, Clone)]
pub struct OneHot {
    pub volume: DenseTensor,
    pub ignore_mask: Vec<bool>,
}

pub fn one_hot(labels: &LabelBatch, num_classes: usize, ignore: Option<u32>) -> Result<OneHot> {
    check_labels(labels, num_classes, ignore)?;
    let hw = labels.height * labels.width;
    let mut data = vec![0.0; labels.batch * num_classes * hw];
    let mut ignore_mask = vec![false; labels.data.len()];
    for b in 0..labels.batch {
        for (k, &l) in labels.image(b).iter().enumerate() {
            if Some(l) == ignore {
                ignore_mask[b * hw + k] = true;
            } else {
                data[(b * num_classes + l as usize) * hw + k] = 1.0;
            }
        }
    }
    let volume = DenseTensor::new(vec![labels.batch, num_classes, labels.height, labels.width], data)?;
    Ok(OneHot { volume, ignore_mask })
}

/// Unfolded windows of one map as a row-major `dim x count` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMatrix {
    pub dim: usize,
    pub count: usize,
    pub data: Vec<f64>,
}

impl PointMatrix {
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.dim).map(|k| self.data[k * self.count + j]).collect()
    }
}

/// Top-left corner (row, col) of every window, enumerated row-major.
pub fn window_origins(height: usize, width: usize, region: RegionConfig) -> Vec<(usize, usize)> {
    let (ny, nx) = (region.positions(height), region.positions(width));
    let mut out = Vec::with_capacity(ny * nx);
    for wy in 0..ny {
        for wx in 0..nx {
            out.push((wy * region.stride, wx * region.stride));
        }
    }
    out
}

fn check_region(height: usize, width: usize, region: RegionConfig) -> Result<()> {
    region.validate()?;
    if height < region.side || width < region.side {
        return Err(Error::RegionTooLarge { side: region.side, height, width });
    }
    Ok(())
}

/// Gathers the windows at `origins` into columns, window entries flattened
/// row-major.
pub fn gather_windows(map: &[f64], width: usize, side: usize, origins: &[(usize, usize)]) -> PointMatrix {
    let dim = side * side;
    let count = origins.len();
    let mut data = vec![0.0; dim * count];
    for (j, &(oy, ox)) in origins.iter().enumerate() {
        for ky in 0..side {
            let row = &map[(oy + ky) * width + ox..(oy + ky) * width + ox + side];
            for (kx, &v) in row.iter().enumerate() {
                data[(ky * side + kx) * count + j] = v;
            }
        }
    }
    PointMatrix { dim, count, data }
}

/// Adjoint of [`gather_windows`]: scatter-adds column gradients back onto
/// the map.
pub fn scatter_windows(
    grad: &[f64],
    height: usize,
    width: usize,
    side: usize,
    origins: &[(usize, usize)],
) -> Vec<f64> {
    let count = origins.len();
    let mut out = vec![0.0; height * width];
    for (j, &(oy, ox)) in origins.iter().enumerate() {
        for ky in 0..side {
            for kx in 0..side {
                out[(oy + ky) * width + ox + kx] += grad[(ky * side + kx) * count + j];
            }
        }
    }
    out
}

/// Unfolds an `H' x W'` map with stride 1 into `R^2 x (H'-R+1)(W'-R+1)` points.
pub fn unfold(map: &[f64], height: usize, width: usize, side: usize) -> Result<PointMatrix> {
    unfold_with(map, height, width, RegionConfig::with_side(side))
}

pub fn unfold_with(map: &[f64], height: usize, width: usize, region: RegionConfig) -> Result<PointMatrix> {
    if map.len() != height * width {
        return Err(Error::shape(&[height, width], &[map.len()]));
    }
    check_region(height, width, region)?;
    let origins = window_origins(height, width, region);
    Ok(gather_windows(map, width, region.side, &origins))
}

/// Where the label points came from. Only `BinaryLabels` promises entries in
/// `{0, 1}`; pooled labels are fractional and oracle samples are continuous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSource {
    BinaryLabels,
    PooledLabels,
    Synthetic,
}

/// Paired `d x N` label and prediction point matrices for one (image, class).
#[derive(Debug, Clone)]
pub struct RegionDistribution {
    pub batch: usize,
    pub class: usize,
    pub dim: usize,
    pub count: usize,
    /// Row-major `dim x count`.
    pub points_y: Vec<f64>,
    /// Row-major `dim x count`.
    pub points_p: Vec<f64>,
    pub source: PointSource,
    /// Window origins on the downsampled map, one per column.
    pub origins: Vec<(usize, usize)>,
}

impl RegionDistribution {
    /// Wraps raw point matrices, e.g. oracle samples.
    pub fn from_points(dim: usize, points_y: Vec<f64>, points_p: Vec<f64>, source: PointSource) -> Result<Self> {
        if dim == 0 || points_y.len() % dim != 0 || points_y.len() != points_p.len() {
            return Err(Error::shape(&[dim, points_y.len() / dim.max(1)], &[points_p.len()]));
        }
        let count = points_y.len() / dim;
        Ok(Self { batch: 0, class: 0, dim, count, points_y, points_p, source, origins: Vec::new() })
    }

    /// Elements held by one of the two point matrices.
    pub fn element_count(&self) -> usize {
        self.dim * self.count
    }

    pub fn column_y(&self, j: usize) -> Vec<f64> {
        (0..self.dim).map(|k| self.points_y[k * self.count + j]).collect()
    }

    pub fn column_p(&self, j: usize) -> Vec<f64> {
        (0..self.dim).map(|k| self.points_p[k * self.count + j]).collect()
    }
}

/// Downsampled spatial size for every (b, c) distribution in a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PooledGeometry {
    pub height: usize,
    pub width: usize,
}

/// Everything the forward pass derives from the labels alone. Reused by the
/// backward pass, which only needs to replay the probability path.
#[derive(Debug, Clone)]
pub struct LabelLayout {
    pub geometry: PooledGeometry,
    /// Pooled one-hot label plane per (b, c), row-major over `H' x W'`.
    pub pooled_labels: Vec<Vec<f64>>,
    /// Window origins kept per image (shared across classes).
    pub origins: Vec<Vec<(usize, usize)>>,
    pub binary: bool,
}

pub fn label_layout(
    labels: &LabelBatch,
    num_classes: usize,
    ignore: Option<u32>,
    cfg: DownsampleConfig,
    region: RegionConfig,
) -> Result<LabelLayout> {
    cfg.validate()?;
    region.validate()?;
    let oh = one_hot(labels, num_classes, ignore)?;
    let (h, w) = (labels.height, labels.width);
    let hw = h * w;
    let mut pooled_labels = Vec::with_capacity(labels.batch * num_classes);
    let mut geometry = None;
    for b in 0..labels.batch {
        for c in 0..num_classes {
            let start = (b * num_classes + c) * hw;
            let plane = downsample_plane(&oh.volume.data()[start..start + hw], h, w, cfg, MapKind::Label)?;
            geometry = Some(PooledGeometry { height: plane.height, width: plane.width });
            pooled_labels.push(plane.values);
        }
    }
    let geometry = match geometry {
        Some(g) => g,
        None => {
            let plane = downsample_plane(&vec![0.0; hw], h, w, cfg, MapKind::Label)?;
            PooledGeometry { height: plane.height, width: plane.width }
        }
    };
    check_region(geometry.height, geometry.width, region)?;

    let all = window_origins(geometry.height, geometry.width, region);
    let mut origins = Vec::with_capacity(labels.batch);
    for b in 0..labels.batch {
        let mask = masked_cells(&oh.ignore_mask[b * hw..(b + 1) * hw], h, w, cfg.factor);
        let kept: Vec<(usize, usize)> = all
            .iter()
            .copied()
            .filter(|&(oy, ox)| {
                (0..region.side).all(|ky| {
                    (0..region.side).all(|kx| !mask[(oy + ky) * geometry.width + ox + kx])
                })
            })
            .collect();
        if kept.is_empty() {
            return Err(Error::EmptyDistribution { batch: b, class: 0 });
        }
        origins.push(kept);
    }
    Ok(LabelLayout { geometry, pooled_labels, origins, binary: cfg.factor == 1 })
}

/// Builds one distribution per (image, class), ordered image-major.
pub fn build_region_distribution(
    batch: &SegmentationBatch,
    cfg: DownsampleConfig,
    region: RegionConfig,
) -> Result<Vec<RegionDistribution>> {
    let layout = label_layout(batch.labels(), batch.num_classes(), batch.ignore_index(), cfg, region)?;
    let (h, w) = (batch.labels().height, batch.labels().width);
    let c_total = batch.num_classes();
    let mut out = Vec::with_capacity(batch.batch_size() * c_total);
    for b in 0..batch.batch_size() {
        let origins = &layout.origins[b];
        for c in 0..c_total {
            let pooled_p = downsample_plane(batch.prob_plane(b, c), h, w, cfg, MapKind::Probability)?;
            let gw = layout.geometry.width;
            let y = gather_windows(&layout.pooled_labels[b * c_total + c], gw, region.side, origins);
            let p = gather_windows(&pooled_p.values, gw, region.side, origins);
            out.push(RegionDistribution {
                batch: b,
                class: c,
                dim: y.dim,
                count: y.count,
                points_y: y.data,
                points_p: p.data,
                source: if layout.binary { PointSource::BinaryLabels } else { PointSource::PooledLabels },
                origins: origins.clone(),
            });
        }
    }
    Ok(out)
}
