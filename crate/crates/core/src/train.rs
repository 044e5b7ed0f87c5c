//! Adam, the MSE training loop with early stopping, and evaluation metrics.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::model::{Forecaster, Model};
use crate::nn::ParamStore;
use crate::tensor::{Graph, Tensor};

pub const LEARNING_RATES: [f64; 3] = [1e-3, 5e-4, 1e-4];

fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    10
}
fn default_patience() -> usize {
    3
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Caps the number of batches per epoch; `None` uses every sample.
    #[serde(default)]
    pub max_batches_per_epoch: Option<usize>,
    /// Permits values outside the default protocol ranges.
    #[serde(default)]
    pub allow_out_of_range: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            batch_size: default_batch(),
            max_epochs: default_epochs(),
            patience: default_patience(),
            seed: 0,
            betas: default_betas(),
            eps: default_eps(),
            max_batches_per_epoch: None,
            allow_out_of_range: false,
        }
    }
}

impl TrainConfig {
    /// Hard errors for unusable values; protocol-range violations are errors
    /// unless `allow_out_of_range` is set, in which case they are returned as warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let (b1, b2) = self.betas;
        if !(self.lr > 0.0 && self.lr.is_finite())
            || self.batch_size == 0
            || self.max_epochs == 0
            || !(0.0..1.0).contains(&b1)
            || !(0.0..1.0).contains(&b2)
            || !(self.eps > 0.0)
        {
            return Err(Error::Config(format!("unusable training configuration {self:?}")));
        }
        let mut warnings = Vec::new();
        if !LEARNING_RATES.contains(&self.lr) {
            warnings.push(format!("learning rate {} outside {LEARNING_RATES:?}", self.lr));
        }
        if !(32..=128).contains(&self.batch_size) {
            warnings.push(format!("batch size {} outside [32, 128]", self.batch_size));
        }
        if self.max_epochs > 10 {
            warnings.push(format!("max_epochs {} above 10", self.max_epochs));
        }
        if !warnings.is_empty() && !self.allow_out_of_range {
            return Err(Error::Config(format!("{}; set allow_out_of_range to override", warnings.join("; "))));
        }
        Ok(warnings)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, (beta1, beta2): (f64, f64), eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { lr, beta1, beta2, eps, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// One update. Every gradient is checked before any parameter changes.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || grads.iter().zip(params.tensors()).any(|(g, p)| g.shape() != p.shape()) {
            return Err(Error::dim("adam_step", "gradients do not mirror parameters".to_string()));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { param: params.names()[i].clone() });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.tensors_mut().iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, gd) = (p.data_mut(), g.data());
            for (i, &gi) in gd.iter().enumerate() {
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                pd[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, bad_epochs: 0 }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn update(&mut self, val: f64) -> StopDecision {
        if val < self.best {
            self.best = val;
            self.bad_epochs = 0;
            StopDecision::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub count: usize,
}

impl Metrics {
    pub fn from_errors(pred: &[f64], target: &[f64]) -> Result<Self> {
        if pred.len() != target.len() {
            return Err(Error::dim("metrics", format!("{} predictions for {} targets", pred.len(), target.len())));
        }
        let mut acc = MetricAccumulator::default();
        acc.add(pred, target);
        acc.finish()
    }
}

#[derive(Clone, Debug, Default)]
struct MetricAccumulator {
    se: f64,
    ae: f64,
    count: usize,
}

impl MetricAccumulator {
    fn add(&mut self, pred: &[f64], target: &[f64]) {
        for (p, t) in pred.iter().zip(target) {
            let e = p - t;
            self.se += e * e;
            self.ae += e.abs();
        }
        self.count += pred.len();
    }

    fn finish(self) -> Result<Metrics> {
        if self.count == 0 {
            return Err(Error::EmptyDataset("no points to evaluate".into()));
        }
        let n = self.count as f64;
        Ok(Metrics { mse: self.se / n, mae: self.ae / n, count: self.count })
    }
}

const EVAL_BATCH: usize = 256;

/// MSE and MAE over every sample, variate and horizon step.
pub fn evaluate(model: &Model, dataset: &WindowedDataset) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("evaluation set has no windows".into()));
    }
    let mut acc = MetricAccumulator::default();
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = dataset.batch(chunk);
        let pred = model.predict(&x)?;
        acc.add(pred.data(), y.data());
    }
    acc.finish()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn write_csv_to<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let fmt = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["epoch", "train_mse", "val_mse"]).map_err(fmt)?;
        for r in &self.epochs {
            w.write_record([r.epoch.to_string(), format!("{:?}", r.train_mse), format!("{:?}", r.val_mse)])
                .map_err(fmt)?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(f)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model carrying the parameters with the best validation MSE.
    pub model: Model,
    pub history: History,
    pub best_val: f64,
    pub warnings: Vec<String>,
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step(model: &mut Model, opt: &mut Adam, x: &Tensor, y: &Tensor, perm: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, true);
    let xi = g.constant(x.clone());
    let yi = g.constant(y.clone());
    let pred = model.forward(&mut g, &p, xi, perm)?;
    let loss = g.mse(pred, yi)?;
    let value = g.value(loss).item();
    g.backward(loss)?;
    let grads = p.grads(&g);
    opt.step(model.params_mut(), &grads)?;
    Ok(value)
}

/// Mini-batch training on MSE with per-epoch validation and early stopping.
pub fn train(mut model: Model, train_set: &WindowedDataset, val_set: &WindowedDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let warnings = cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set has no windows".into()));
    }
    if model.params().is_empty() {
        let best_val = evaluate(&model, val_set)?.mse;
        return Ok(TrainOutcome { model, history: History::default(), best_val, warnings });
    }
    let mut opt = Adam::new(model.params(), cfg.lr, cfg.betas, cfg.eps);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut perm_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_9e4d);
    let policy = model.permutation_policy();
    let n = train_set.n_vars();
    let mut stopper = EarlyStopper::new(cfg.patience.max(1));
    let mut best = model.params().clone();
    let mut history = History::default();
    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        indices.shuffle(&mut order_rng);
        let mut batches: Vec<&[usize]> = indices.chunks(cfg.batch_size).collect();
        if let Some(cap) = cfg.max_batches_per_epoch {
            batches.truncate(cap.max(1));
        }
        let (mut total, mut seen) = (0.0, 0usize);
        for b in batches {
            let (x, y) = train_set.batch(b);
            let perm = policy.train_perm(n, &mut perm_rng);
            total += train_step(&mut model, &mut opt, &x, &y, &perm)? * b.len() as f64;
            seen += b.len();
        }
        let val_mse = evaluate(&model, val_set)?.mse;
        history.epochs.push(EpochRecord { epoch, train_mse: total / seen as f64, val_mse });
        match stopper.update(val_mse) {
            StopDecision::Improved => best = model.params().clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    *model.params_mut() = best;
    Ok(TrainOutcome { model, history, best_val: stopper.best(), warnings })
}
