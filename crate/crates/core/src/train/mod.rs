//! Losses, optimizer, schedule and the training loop.

pub mod baseline;
pub mod loss;
pub mod optim;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::arch::{save_checkpoint, LamoModel, ModelError};
use crate::autodiff::Tape;
use crate::config::{self, ConfigError};
use crate::data::Dataset;
use crate::tensor::{Rng, Scalar, Tensor, TensorError};

pub use baseline::RidgeBaseline;
pub use optim::{clip_global_norm, AdamW, OneCycle, OptState};

pub const METRICS_HEADER: &str = "epoch,step,lr,train_loss,test_rel_l2";
const SHUFFLE_STREAM: u64 = 0x5348;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at step {step} (lr {lr:e}); aborting")]
    NonFinite { step: usize, lr: f64, loss: f64 },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("baseline: {0}")]
    Baseline(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    RelL2,
    RelL2PlusGdl,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div: f64,
    /// Global-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub loss: LossKind,
    pub gdl_weight: f64,
    pub seed: u64,
    /// Write `epoch-N.ckpt` every N epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Adds one metrics row per optimizer step.
    pub log_steps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 4,
            max_lr: 1e-3,
            weight_decay: 1e-5,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div: 1e4,
            grad_clip: 1.0,
            loss: LossKind::RelL2,
            gdl_weight: 0.1,
            seed: 0,
            checkpoint_every: 0,
            log_steps: false,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 13] = [
        "epochs",
        "batch_size",
        "max_lr",
        "weight_decay",
        "pct_start",
        "div_factor",
        "final_div",
        "grad_clip",
        "loss",
        "gdl_weight",
        "seed",
        "checkpoint_every",
        "log_steps",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "epochs" => self.epochs = config::parse_value(key, value)?,
            "batch_size" => self.batch_size = config::parse_value(key, value)?,
            "max_lr" => self.max_lr = config::parse_value(key, value)?,
            "weight_decay" => self.weight_decay = config::parse_value(key, value)?,
            "pct_start" => self.pct_start = config::parse_value(key, value)?,
            "div_factor" => self.div_factor = config::parse_value(key, value)?,
            "final_div" => self.final_div = config::parse_value(key, value)?,
            "grad_clip" => self.grad_clip = config::parse_value(key, value)?,
            "loss" => {
                self.loss = match value {
                    "rel_l2" => LossKind::RelL2,
                    "rel_l2_plus_gdl" => LossKind::RelL2PlusGdl,
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            value: value.into(),
                            msg: "expected rel_l2 or rel_l2_plus_gdl".into(),
                        })
                    }
                }
            }
            "gdl_weight" => self.gdl_weight = config::parse_value(key, value)?,
            "seed" => self.seed = config::parse_value(key, value)?,
            "checkpoint_every" => self.checkpoint_every = config::parse_value(key, value)?,
            "log_steps" => self.log_steps = config::parse_bool(key, value)?,
            _ => return Err(config::unknown(key, &Self::KEYS)),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let loss = match self.loss {
            LossKind::RelL2 => "rel_l2",
            LossKind::RelL2PlusGdl => "rel_l2_plus_gdl",
        };
        let values = [
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.max_lr.to_string(),
            self.weight_decay.to_string(),
            self.pct_start.to_string(),
            self.div_factor.to_string(),
            self.final_div.to_string(),
            self.grad_clip.to_string(),
            loss.to_string(),
            self.gdl_weight.to_string(),
            self.seed.to_string(),
            self.checkpoint_every.to_string(),
            self.log_steps.to_string(),
        ];
        let mut s = String::new();
        for (k, v) in Self::KEYS.iter().zip(values) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// A learning rate of exactly 0 is accepted so a run can be frozen.
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.pct_start > 0.0 && self.pct_start < 1.0) {
            return err("pct_start must lie in (0, 1)");
        }
        if !(self.max_lr >= 0.0) || !self.max_lr.is_finite() {
            return err("max_lr must be finite and non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return err("epochs and batch_size must be positive");
        }
        if !(self.div_factor > 0.0 && self.final_div > 0.0) {
            return err("div_factor and final_div must be positive");
        }
        Ok(())
    }

    pub fn schedule(&self) -> OneCycle {
        OneCycle {
            max_lr: self.max_lr,
            pct_start: self.pct_start,
            div_factor: self.div_factor,
            final_div: self.final_div,
        }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mean: f64,
    pub per_sample: Vec<f64>,
}

impl EvalReport {
    pub fn from_samples(per_sample: Vec<f64>) -> Self {
        let mean = per_sample.iter().sum::<f64>() / per_sample.len().max(1) as f64;
        EvalReport { mean, per_sample }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_rel_l2: f64,
}

pub struct TrainOutcome<T> {
    pub last: LamoModel<T>,
    pub best: LamoModel<T>,
    pub best_test_rel_l2: f64,
    pub metrics: Vec<EpochMetrics>,
    pub csv: String,
}

const EVAL_BATCH: usize = 16;

/// Mean and per-sample relative L2 of de-normalized predictions against raw
/// targets. The model is not modified.
pub fn evaluate<T: Scalar>(model: &LamoModel<T>, ds: &Dataset) -> Result<EvalReport, TrainError> {
    check_compat(model, ds)?;
    let x = ds.normalized_inputs()?;
    let coords: Tensor<T> = ds.coords().cast();
    let mut per_sample = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let xb: Tensor<T> = take_samples(&x, chunk).cast();
        let pred: Tensor<f64> = model.predict(&xb, &coords)?.cast();
        let pred = ds.stats().denormalize_targets(&pred)?;
        per_sample.extend(loss::rel_l2_per_sample(&pred, &take_samples(ds.targets(), chunk))?);
    }
    Ok(EvalReport::from_samples(per_sample))
}

fn check_compat<T: Scalar>(model: &LamoModel<T>, ds: &Dataset) -> Result<(), TrainError> {
    let c = model.config();
    if c.in_channels != ds.in_channels() || c.out_channels != ds.out_channels() || c.coord_channels != ds.coord_channels() {
        return Err(TrainError::Config(format!(
            "model channels (in {}, out {}, coords {}) do not match the data (in {}, out {}, coords {})",
            c.in_channels,
            c.out_channels,
            c.coord_channels,
            ds.in_channels(),
            ds.out_channels(),
            ds.coord_channels()
        )));
    }
    if c.points() != 0 && c.points() != ds.points() {
        return Err(TrainError::Config(format!(
            "resolution mismatch: model expects {} points, data has {}",
            c.points(),
            ds.points()
        )));
    }
    Ok(())
}

/// Copies samples `idx` of a `[n, ...]` tensor into a new batch.
pub fn take_samples<T: Scalar>(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let per = t.len() / t.shape()[0].max(1);
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, data).unwrap()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn save(model: &LamoModel<impl Scalar>, path: &Path) -> Result<(), TrainError> {
    save_checkpoint(model, path).map_err(|e| match e {
        ModelError::Format(crate::tensor::ltns::FormatError::Io(source)) => TrainError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other.into(),
    })
}

fn fmt_row(m: &EpochMetrics) -> String {
    format!("{},{},{:e},{:e},{:e}\n", m.epoch, m.step, m.lr, m.train_loss, m.test_rel_l2)
}

/// Mini-batch training in normalized units. Writes `metrics.csv`,
/// `best.ckpt` and `last.ckpt` under `out` when given. `on_epoch` sees each
/// epoch's metrics as they are produced.
pub fn train<T: Scalar>(
    mut model: LamoModel<T>,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    check_compat(&model, train_ds)?;
    check_compat(&model, test_ds)?;
    let grid = match cfg.loss {
        LossKind::RelL2 => None,
        LossKind::RelL2PlusGdl => Some(
            train_ds
                .grid()
                .filter(|&(h, w)| h >= 2 && w >= 2)
                .ok_or_else(|| TrainError::Config("the gradient loss needs 2-D grid data".into()))?,
        ),
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }

    let x: Tensor<T> = train_ds.normalized_inputs()?.cast();
    let y: Tensor<T> = train_ds.normalized_targets()?.cast();
    let coords: Tensor<T> = train_ds.coords().cast();
    let n = train_ds.len();
    let bs = cfg.batch_size.min(n.max(1));
    let steps_per_epoch = n.div_ceil(bs);
    let total = cfg.epochs * steps_per_epoch;
    let sched = cfg.schedule();
    let opt = cfg.optimizer();
    let mut state = OptState::new(model.params().values());
    let mut rng = Rng::new(cfg.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..n).collect();

    let mut csv = format!("{METRICS_HEADER}\n");
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best = model.clone();
    let mut best_test = f64::INFINITY;
    let mut step = 0;
    let mut lr = sched.lr(0, total);
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(bs) {
            lr = sched.lr(step, total);
            let xb = take_samples(&x, batch);
            let yb = take_samples(&y, batch);
            let mut tape = Tape::new();
            let p = model.bind(&mut tape, true);
            let xv = tape.constant(xb);
            let cv = tape.constant(coords.clone());
            let pred = model.forward(&mut tape, &p, xv, cv)?;
            let mut l = tape.rel_l2(pred, &yb)?;
            if let Some((h, w)) = grid {
                let g = loss::gdl_on_tape(&mut tape, pred, &yb, (h, w))?;
                let g = tape.scale(g, T::of(cfg.gdl_weight));
                l = tape.add(l, g)?;
            }
            let lv = tape.value(l).item().f64();
            if !lv.is_finite() {
                return Err(TrainError::NonFinite { step, lr, loss: lv });
            }
            tape.backward(l)?;
            let mut grads: Vec<Tensor<T>> = p
                .iter()
                .zip(model.params().values())
                .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            if cfg.grad_clip > 0.0 {
                clip_global_norm(&mut grads, cfg.grad_clip);
            }
            opt.step(model.params_mut().values_mut(), &grads, &mut state, lr);
            step += 1;
            loss_sum += lv * batch.len() as f64;
            if cfg.log_steps {
                let _ = writeln!(csv, "{epoch},{step},{lr:e},{lv:e},");
            }
        }
        let test = evaluate(&model, test_ds)?.mean;
        let m = EpochMetrics {
            epoch,
            step,
            lr,
            train_loss: loss_sum / n as f64,
            test_rel_l2: test,
        };
        csv.push_str(&fmt_row(&m));
        on_epoch(&m);
        metrics.push(m);
        if test < best_test {
            best_test = test;
            best = model.clone();
            if let Some(dir) = out {
                save(&best, &dir.join("best.ckpt"))?;
            }
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                save(&model, &dir.join(format!("epoch-{epoch}.ckpt")))?;
            }
            let path = dir.join("metrics.csv");
            std::fs::write(&path, &csv).map_err(io_err(&path))?;
        }
    }
    if let Some(dir) = out {
        save(&model, &dir.join("last.ckpt"))?;
    }
    Ok(TrainOutcome {
        last: model,
        best,
        best_test_rel_l2: best_test,
        metrics,
        csv,
    })
}
