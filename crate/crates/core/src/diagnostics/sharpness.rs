use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::model::{Forecaster, Model};
use crate::train::Metrics;

/// Perturbation radius, absolute or as a fraction of `||theta||_2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Radius {
    Absolute(f64),
    Relative(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SharpnessConfig {
    pub radius: Radius,
    pub samples: usize,
    pub seed: u64,
    /// Windows of the dataset used for the loss; spread evenly over it.
    pub max_windows: usize,
}


impl Default for SharpnessConfig {
    fn default() -> Self {
        Self { radius: Radius::Relative(0.05), samples: 100, seed: 0, max_windows: 512 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessEstimate {
    /// Mean of `L(theta + rho u) - L(theta)`.
    pub value: f64,
    pub rho: f64,
    pub samples: usize,
    pub base_loss: f64,
}

/// Uniform direction on the unit sphere of dimension `dim`.
pub fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Mean loss increase over `samples` random perturbations of radius `rho`.
pub fn sharpness_of<F>(mut loss: F, theta: &[f64], rho: f64, samples: usize, seed: u64) -> Result<SharpnessEstimate>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(rho >= 0.0) || samples == 0 {
        return Err(Error::InvalidInput { op: "sharpness", detail: format!("need rho >= 0 and samples >= 1, got {rho}, {samples}") });
    }
    let base = loss(theta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut work = theta.to_vec();
    for _ in 0..samples {
        let u = unit_direction(&mut rng, theta.len());
        for ((w, t), d) in work.iter_mut().zip(theta).zip(&u) {
            *w = t + rho * d;
        }
        total += loss(&work)? - base;
    }
    Ok(SharpnessEstimate { value: total / samples as f64, rho, samples, base_loss: base })
}

/// Sharpness of a trained model's MSE on (a subset of) `dataset`.
pub fn model_sharpness(model: &Model, dataset: &WindowedDataset, cfg: &SharpnessConfig) -> Result<SharpnessEstimate> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("sharpness needs at least one window".into()));
    }
    let len = dataset.len();
    let k = cfg.max_windows.clamp(1, len);
    let idx: Vec<usize> = (0..k).map(|i| i * len / k).collect();
    let (x, y) = dataset.batch(&idx);
    let theta = model.params().flatten();
    let rho = match cfg.radius {
        Radius::Absolute(r) => r,
        Radius::Relative(f) => f * theta.iter().map(|v| v * v).sum::<f64>().sqrt(),
    };
    let mut probe = model.clone();
    sharpness_of(
        |p| {
            probe.params_mut().set_flat(p)?;
            let pred = probe.predict(&x)?;
            Ok(Metrics::from_errors(pred.data(), y.data())?.mse)
        },
        &theta,
        rho,
        cfg.samples,
        cfg.seed,
    )
}
