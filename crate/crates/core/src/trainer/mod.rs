//! Small end-to-end training loop on the synthetic shapes dataset.
//!
//! The model is a three-layer conv net producing full-resolution logits; the
//! objective is the BCE + RMI loss of [`crate::autodiff`]. Learning rate
//! follows linear warmup then polynomial decay.

pub mod metrics;
pub mod model;
pub mod shapes;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use metrics::{argmax_classes, evaluate_predictions, EvalReport, MetricAccumulator};
pub use model::{ConvNet, Sgd};
pub use shapes::{generate_shapes, generate_shapes_with, ShapesDataset, ShapesOptions, Split, SplitSizes, NUM_CLASSES};

use crate::autodiff::{forward_with_tape, LossConfig};
use crate::error::{Error, Result};
use crate::region::{DownsampleConfig, PoolMode, RegionConfig};
use crate::rmi::{RmiConfig, DEFAULT_SIGMA_P_RIDGE, DEFAULT_XI};
use crate::rng::SplitMix64;
use crate::tensor::{rmt, DenseTensor};

pub const CHECKPOINT_FORMAT: &str = "rmi-checkpoint-v1";
pub const WEIGHTS_FILE: &str = "weights.rmt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_iter: usize,
    pub slow_iters: usize,
    pub power: f64,
    pub batch: usize,
    pub lambda: f64,
    pub df: usize,
    pub pool: PoolMode,
    pub region_side: usize,
    pub xi: f64,
    pub seed: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Random left-right flips of training images.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            max_iter: 1500,
            slow_iters: 100,
            power: 0.9,
            batch: 2,
            lambda: 0.5,
            df: 4,
            pool: PoolMode::Average,
            region_side: 3,
            xi: DEFAULT_XI,
            seed: 0,
            momentum: 0.9,
            weight_decay: 1e-4,
            flip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("must be finite and >= 0, got {}", self.lr)));
        }
        if self.max_iter == 0 {
            return Err(Error::config("max_iter", "must be positive"));
        }
        if self.slow_iters >= self.max_iter {
            return Err(Error::config("slow_iters", format!("must be < max_iter ({}), got {}", self.max_iter, self.slow_iters)));
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return Err(Error::config("power", format!("must be > 0, got {}", self.power)));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", format!("must be finite and >= 0, got {}", self.weight_decay)));
        }
        self.loss_config().validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            downsample: DownsampleConfig { factor: self.df, mode: self.pool },
            region: RegionConfig::with_side(self.region_side),
            rmi: RmiConfig { xi: self.xi, sigma_p_ridge: DEFAULT_SIGMA_P_RIDGE },
            lambda: self.lambda,
            ignore_index: None,
        }
    }
}

/// Warmup `lr * step / slow_iters`, then
/// `lr * (1 - (step - slow_iters) / (max_iter - slow_iters))^power`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.slow_iters {
        return cfg.lr * step as f64 / cfg.slow_iters as f64;
    }
    let span = (cfg.max_iter - cfg.slow_iters) as f64;
    let frac = ((step - cfg.slow_iters) as f64 / span).min(1.0);
    cfg.lr * (1.0 - frac).powf(cfg.power)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub lr: f64,
    pub bce: f64,
    pub rmi: f64,
    pub total: f64,
}

pub struct TrainOutcome {
    pub model: ConvNet,
    pub history: Vec<HistoryRow>,
}

/// Endless stream of training indices: one shuffled permutation per epoch.
struct EpochOrder {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    rng: SplitMix64,
}

impl EpochOrder {
    fn new(pool: &[usize], rng: SplitMix64) -> Self {
        Self { pool: pool.to_vec(), order: Vec::new(), pos: 0, rng }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order = self.pool.clone();
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Freshly initialized model for `seed`; [`train`] starts from the same weights.
pub fn init_model(seed: u64) -> ConvNet {
    ConvNet::new(1, NUM_CLASSES, SplitMix64::new(seed).fork().next_u64())
}

pub fn train(dataset: &ShapesDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_from(init_model(cfg.seed), dataset, cfg)
}

/// Train `model` in place from its current weights.
pub fn train_from(mut model: ConvNet, dataset: &ShapesDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::config("dataset", "training split is empty"));
    }
    if model.in_channels() != 1 || model.num_classes() != NUM_CLASSES {
        return Err(Error::shape(&[1, NUM_CLASSES], &[model.in_channels(), model.num_classes()]));
    }
    let loss_cfg = cfg.loss_config();
    let mut root = SplitMix64::new(cfg.seed);
    let _init = root.fork();
    let mut order = EpochOrder::new(&dataset.train, root.fork());
    let mut aug = root.fork();
    let mut opt = Sgd::new(&model, cfg.momentum, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.max_iter);

    for step in 0..cfg.max_iter {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| order.next()).collect();
        let flips: Vec<bool> = idx.iter().map(|_| cfg.flip && aug.below(2) == 1).collect();
        let (images, labels) = dataset.batch(&idx, &flips)?;
        let (logits, cache) = model.forward(&images)?;
        let (report, mut tape) = forward_with_tape(&labels, &logits, &loss_cfg)?;
        if !report.total.is_finite() {
            return Err(Error::DivergenceDetected { step, loss: report.total });
        }
        let dlogits = tape.backward()?;
        let grads = model.backward(&cache, &dlogits)?;
        let lr = lr_at(step, cfg);
        opt.step(&mut model, &grads, lr);
        history.push(HistoryRow { step, lr, bce: report.bce, rmi: report.rmi, total: report.total });
    }
    Ok(TrainOutcome { model, history })
}

/// Metrics of `model` on one split.
pub fn evaluate(model: &ConvNet, dataset: &ShapesDataset, split: Split) -> Result<EvalReport> {
    let (h, w) = (dataset.height, dataset.width);
    let mut acc = MetricAccumulator::new(model.num_classes());
    for &i in dataset.split(split) {
        let (img, lab) = dataset.batch(&[i], &[false])?;
        let logits = model.predict(&img)?;
        let pred = argmax_classes(logits.data(), model.num_classes(), h * w);
        acc.add(&pred, lab.image(0), h, w)?;
    }
    Ok(acc.report())
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in history {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history_csv(path: impl AsRef<Path>) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format { format: "csv", reason: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub in_channels: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerEntry>,
    pub config: Option<TrainConfig>,
}

fn layer_tensors(model: &ConvNet) -> Result<Vec<(String, DenseTensor)>> {
    let mut out = Vec::new();
    for (i, l) in model.layers.iter().enumerate() {
        out.push((format!("conv{i}.weight"), DenseTensor::new(vec![l.cout, l.cin, 3, 3], l.weight.clone())?));
        out.push((format!("conv{i}.bias"), DenseTensor::new(vec![l.cout], l.bias.clone())?));
    }
    Ok(out)
}

/// Writes `weights.rmt` (RMT1 tensors in manifest order) and `manifest.json`.
pub fn save_checkpoint(dir: impl AsRef<Path>, model: &ConvNet, config: Option<&TrainConfig>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let named = layer_tensors(model)?;
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.to_string(),
        in_channels: model.in_channels(),
        num_classes: model.num_classes(),
        layers: named.iter().map(|(n, t)| LayerEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        config: config.copied(),
    };
    let tensors: Vec<DenseTensor> = named.into_iter().map(|(_, t)| t).collect();
    rmt::save_all(dir.join(WEIGHTS_FILE), &tensors)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ConvNet, Manifest)> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Format { format: "checkpoint", reason: format!("unknown format `{}`", manifest.format) });
    }
    let tensors = rmt::load_all(dir.join(WEIGHTS_FILE))?;
    if tensors.len() != manifest.layers.len() || tensors.len() % 2 != 0 || tensors.is_empty() {
        return Err(Error::Format {
            format: "checkpoint",
            reason: format!("manifest lists {} tensors, weights file holds {}", manifest.layers.len(), tensors.len()),
        });
    }
    let mut layers = Vec::new();
    for (pair, entries) in tensors.chunks_exact(2).zip(manifest.layers.chunks_exact(2)) {
        let (w, b) = (&pair[0], &pair[1]);
        for (t, e) in pair.iter().zip(entries) {
            if t.shape() != e.shape.as_slice() {
                return Err(Error::shape(&e.shape, t.shape()));
            }
        }
        match (w.shape(), b.shape()) {
            (&[cout, cin, 3, 3], &[cb]) if cb == cout => layers.push(model::Conv2d {
                cin,
                cout,
                weight: w.data().to_vec(),
                bias: b.data().to_vec(),
            }),
            _ => return Err(Error::shape(&[0, 0, 3, 3], w.shape())),
        }
    }
    let chained = layers.windows(2).all(|p| p[0].cout == p[1].cin);
    if !chained || layers[0].cin != manifest.in_channels || layers.last().map(|l| l.cout) != Some(manifest.num_classes) {
        return Err(Error::Format { format: "checkpoint", reason: "layer channels do not chain".into() });
    }
    Ok((ConvNet { layers }, manifest))
}
