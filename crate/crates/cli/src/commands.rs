use std::fs;
use std::path::Path;

use rmi_core::autodiff::{gradcheck_with, random_instance};
use rmi_core::autodiff::{loss_from_probs, LossConfig};
use rmi_core::oracle::check_gaussian;
use rmi_core::region::{read_pgm_stack, DownsampleConfig, LabelBatch, RegionConfig, SegmentationBatch};
use rmi_core::rmi::{RmiConfig, DEFAULT_SIGMA_P_RIDGE};
use rmi_core::tensor::rmt;
use rmi_core::trainer::{
    self, generate_shapes_with, load_checkpoint, save_checkpoint, write_history_csv, ShapesDataset, ShapesOptions, Split,
    SplitSizes, TrainConfig,
};
use rmi_core::{Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::args::{DataFlags, EvalArgs, GradcheckArgs, LossArgs, LossFlags, OracleArgs, TrainArgs};

/// Lines for standard output plus the exit status of a successful run.
pub struct Outcome {
    pub lines: Vec<String>,
    pub passed: bool,
}

impl Outcome {
    fn ok(lines: Vec<String>) -> Self {
        Self { lines, passed: true }
    }
}

fn line<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string(value)?)
}

impl LossFlags {
    fn to_config(&self, default_df: usize, ignore_index: Option<u32>) -> Result<LossConfig> {
        let cfg = LossConfig {
            downsample: DownsampleConfig { factor: self.df.unwrap_or(default_df), mode: self.pool },
            region: RegionConfig { side: self.region_side, stride: self.stride },
            rmi: RmiConfig { xi: self.xi, sigma_p_ridge: self.sigma_p_ridge },
            lambda: self.lambda,
            ignore_index,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_labels(path: &Path) -> Result<LabelBatch> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P5") {
        read_pgm_stack(&bytes)
    } else {
        let t = rmt::read_tensor(bytes.as_slice())?
            .ok_or_else(|| Error::Format { format: "RMT1", reason: format!("{} holds no tensor", path.display()) })?;
        LabelBatch::from_tensor(&t)
    }
}

pub fn loss(args: &LossArgs) -> Result<Outcome> {
    let ignore = if args.no_ignore { None } else { Some(args.ignore_index) };
    let cfg = args.loss.to_config(4, ignore)?;
    let labels = read_labels(&args.labels)?;
    let probs = rmt::load(&args.probs)?;
    let batch = SegmentationBatch::new(labels, probs, ignore)?;
    let report = loss_from_probs(&batch, &cfg)?;
    let mut lines = Vec::with_capacity(report.terms.len() + 1);
    for t in &report.terms {
        lines.push(line(t)?);
    }
    lines.push(line(&json!({
        "command": "loss",
        "config": cfg,
        "total": report.total,
        "bce": report.bce,
        "rmi": report.rmi,
        "lambda": report.lambda,
        "terms": report.terms.len(),
    }))?);
    Ok(Outcome::ok(lines))
}

pub fn gradcheck_cmd(args: &GradcheckArgs) -> Result<Outcome> {
    let cfg = args.loss.to_config(2, None)?;
    for (field, v) in [("batch", args.batch), ("classes", args.classes), ("instances", args.instances), ("probes", args.probes)] {
        if v == 0 {
            return Err(Error::config(field, "must be positive"));
        }
    }
    if !(args.threshold > 0.0) {
        return Err(Error::config("threshold", "must be positive"));
    }
    let mut lines = Vec::new();
    let (mut worst_rel, mut worst_abs) = (0.0f64, 0.0f64);
    for k in 0..args.instances as u64 {
        let seed = args.seed.wrapping_add(k);
        let (labels, logits) = random_instance(args.batch, args.classes, args.height, args.width, seed);
        let r = gradcheck_with(&labels, &logits, &cfg, args.probes, args.step, seed, args.fd_precision)?;
        worst_rel = worst_rel.max(r.max_rel_err);
        worst_abs = worst_abs.max(r.max_abs_err);
        lines.push(line(&json!({ "instance": k, "seed": seed, "report": r }))?);
    }
    let passed = worst_rel <= args.threshold;
    lines.push(line(&json!({
        "command": "gradcheck",
        "config": {
            "loss": cfg,
            "batch": args.batch,
            "classes": args.classes,
            "height": args.height,
            "width": args.width,
            "instances": args.instances,
            "probes": args.probes,
            "step": args.step,
            "threshold": args.threshold,
            "fd_precision": args.fd_precision,
            "seed": args.seed,
        },
        "max_rel_err": worst_rel,
        "max_abs_err": worst_abs,
        "passed": passed,
    }))?);
    Ok(Outcome { lines, passed })
}

pub fn oracle(args: &OracleArgs) -> Result<Outcome> {
    let rmi = RmiConfig { xi: args.xi, sigma_p_ridge: DEFAULT_SIGMA_P_RIDGE };
    rmi.validate()?;
    let mut lines = Vec::new();
    let mut passed = true;
    for &d in &args.dims {
        for &rho in &args.rhos {
            let check = check_gaussian(d, rho, args.n, args.seeds, args.seed, &rmi)?;
            let ok = check.within_tolerance && check.not_above_exact;
            passed &= ok;
            lines.push(line(&json!({ "property": "gaussian_mi", "passed": ok, "check": check }))?);
        }
    }
    lines.push(line(&json!({
        "command": "oracle",
        "config": { "d": args.dims, "rho": args.rhos, "n": args.n, "seeds": args.seeds, "seed": args.seed, "xi": args.xi },
        "checks": args.dims.len() * args.rhos.len(),
        "passed": passed,
    }))?);
    Ok(Outcome { lines, passed })
}

fn dataset(flags: &DataFlags) -> Result<ShapesDataset> {
    let sizes = SplitSizes { train: flags.train_size, val: flags.val_size, test: flags.test_size };
    let opts = ShapesOptions { noise: flags.noise, ..ShapesOptions::default() };
    generate_shapes_with(sizes, flags.size, flags.size, flags.data_seed, &opts)
}

pub fn train(args: &TrainArgs) -> Result<Outcome> {
    let cfg = TrainConfig {
        lr: args.lr,
        max_iter: args.max_iter,
        slow_iters: args.slow_iters,
        power: args.power,
        batch: args.batch,
        lambda: args.lambda,
        df: args.df,
        pool: args.pool,
        region_side: args.region_side,
        xi: args.xi,
        seed: args.seed,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        flip: !args.no_flip,
    };
    cfg.validate()?;
    let ds = dataset(&args.data)?;
    let out = trainer::train(&ds, &cfg)?;
    save_checkpoint(&args.out, &out.model, Some(&cfg))?;
    write_history_csv(args.out.join("history.csv"), &out.history)?;
    let last = out.history.last().copied();
    Ok(Outcome::ok(vec![line(&json!({
        "command": "train",
        "config": { "train": cfg, "data": data_json(&args.data, ds.seed) },
        "steps": out.history.len(),
        "final": last,
        "checkpoint": args.out.display().to_string(),
    }))?]))
}

pub fn eval(args: &EvalArgs) -> Result<Outcome> {
    let split: Split = args.split.parse()?;
    let ds = dataset(&args.data)?;
    let (model, source) = match &args.checkpoint {
        Some(dir) => (load_checkpoint(dir)?.0, dir.display().to_string()),
        None => (trainer::init_model(args.seed), format!("fresh init, seed {}", args.seed)),
    };
    let report = trainer::evaluate(&model, &ds, split)?;
    Ok(Outcome::ok(vec![line(&json!({
        "command": "eval",
        "config": { "split": split, "seed": args.seed, "data": data_json(&args.data, ds.seed) },
        "model": source,
        "report": report,
    }))?]))
}

fn data_json(flags: &DataFlags, resolved_seed: u64) -> serde_json::Value {
    json!({
        "train_size": flags.train_size,
        "val_size": flags.val_size,
        "test_size": flags.test_size,
        "size": flags.size,
        "data_seed": flags.data_seed,
        "resolved_seed": resolved_seed,
        "noise": flags.noise,
    })
}
