use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::probes::median;
use crate::error::{Error, Result};
use crate::model::{Forecaster, ModelSpec, SdeConfig};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepVariable {
    /// Number of patches; the lookback is set to `P + (J - 1) * stride`.
    J,
    /// Number of variates.
    N,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyConfig {
    pub base: SdeConfig,
    pub n_vars: usize,
    pub batch_size: usize,
    pub variable: SweepVariable,
    pub values: Vec<usize>,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyPoint {
    pub value: usize,
    pub lookback: usize,
    pub n_vars: usize,
    /// Median seconds of one forward and backward pass.
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub variable: SweepVariable,
    pub repeats: usize,
    pub points: Vec<EfficiencyPoint>,
    /// Least-squares slope of `ln seconds` against `ln value`.
    pub slope: f64,
}

pub const MIN_REPEATS: usize = 5;
pub const MIN_POINTS: usize = 3;

pub fn log_log_slope(points: &[(f64, f64)]) -> Result<f64> {
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if xs.len() < 2 || !(sxx > 0.0) {
        return Err(Error::InvalidInput { op: "log_log_slope", detail: "need at least two distinct sweep values".into() });
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

fn time_point(cfg: &EfficiencyConfig, value: usize) -> Result<EfficiencyPoint> {
    let mut model_cfg = cfg.base.clone();
    let mut n = cfg.n_vars;
    match cfg.variable {
        SweepVariable::J => model_cfg.lookback = model_cfg.patch_len + (value - 1) * model_cfg.stride,
        SweepVariable::N => n = value,
    }
    let model = ModelSpec::Sde(model_cfg.clone()).build(cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let b = cfg.batch_size;
    let x = Tensor::new(vec![b, n, model_cfg.lookback], (0..b * n * model_cfg.lookback).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let y = Tensor::new(vec![b, n, model_cfg.horizon], (0..b * n * model_cfg.horizon).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let perm: Vec<usize> = (0..n).collect();
    let step = || -> Result<f64> {
        let start = Instant::now();
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, true);
        let (xi, yi) = (g.constant(x.clone()), g.constant(y.clone()));
        let pred = model.forward(&mut g, &p, xi, &perm)?;
        let loss = g.mse(pred, yi)?;
        g.backward(loss)?;
        Ok(start.elapsed().as_secs_f64())
    };
    for _ in 0..cfg.warmup {
        step()?;
    }
    let times = (0..cfg.repeats).map(|_| step()).collect::<Result<Vec<_>>>()?;
    Ok(EfficiencyPoint { value, lookback: model_cfg.lookback, n_vars: n, seconds: median(&times) })
}

/// Times forward and backward over a sweep of J or N and fits the log-log slope.
pub fn efficiency_benchmark(cfg: &EfficiencyConfig) -> Result<EfficiencyReport> {
    let mut distinct = cfg.values.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < MIN_POINTS || distinct.contains(&0) {
        return Err(Error::InvalidInput {
            op: "efficiency_benchmark",
            detail: format!("need at least {MIN_POINTS} distinct positive sweep values, got {:?}", cfg.values),
        });
    }
    if cfg.repeats < MIN_REPEATS || cfg.batch_size == 0 || cfg.n_vars == 0 {
        return Err(Error::InvalidInput {
            op: "efficiency_benchmark",
            detail: format!("need repeats >= {MIN_REPEATS} and positive batch size and n_vars"),
        });
    }
    let points = cfg.values.iter().map(|&v| time_point(cfg, v)).collect::<Result<Vec<_>>>()?;
    let slope = log_log_slope(&points.iter().map(|p| (p.value as f64, p.seconds)).collect::<Vec<_>>())?;
    Ok(EfficiencyReport { variable: cfg.variable, repeats: cfg.repeats, points, slope })
}
