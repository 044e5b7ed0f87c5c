use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SeriesTable;
use crate::error::{Error, Result};

fn default_phi() -> f64 {
    0.95
}
fn default_cycle() -> usize {
    24
}
fn default_dictionary() -> usize {
    4
}
fn default_spread() -> f64 {
    0.5
}
fn default_lags() -> Vec<usize> {
    vec![24, 36, 48]
}
fn default_coupling() -> f64 {
    0.8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Independent AR(1) series per variate.
    Order {
        #[serde(default = "default_phi")]
        phi: f64,
    },
    /// Cycles of fixed waveforms; the next cycle's waveform is a fixed function
    /// of the current one, with a random per-cycle amplitude.
    Semantic {
        #[serde(default = "default_cycle")]
        cycle: usize,
        #[serde(default = "default_dictionary")]
        dictionary: usize,
        #[serde(default = "default_spread")]
        amplitude_spread: f64,
    },
    /// Variate 0 is AR(1); variate `i >= 1` mixes a lagged copy of variate 0
    /// with its own AR(1) process. `noise_variates` appends independent
    /// standard-normal columns.
    CrossVariate {
        #[serde(default = "default_phi")]
        phi: f64,
        #[serde(default = "default_lags")]
        lags: Vec<usize>,
        #[serde(default = "default_coupling")]
        coupling: f64,
        #[serde(default)]
        noise_variates: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(flatten)]
    pub kind: SyntheticKind,
    pub length: usize,
    pub n_vars: usize,
    /// Innovation std for AR processes, additive noise std for waveforms.
    pub noise: f64,
    pub seed: u64,
}

const BURN_IN: usize = 200;

impl SyntheticSpec {
    pub fn order(length: usize, n_vars: usize, seed: u64) -> Self {
        Self { kind: SyntheticKind::Order { phi: 0.95 }, length, n_vars, noise: 1.0, seed }
    }

    pub fn semantic(length: usize, n_vars: usize, seed: u64) -> Self {
        Self {
            kind: SyntheticKind::Semantic { cycle: 24, dictionary: 4, amplitude_spread: 0.5 },
            length,
            n_vars,
            noise: 0.1,
            seed,
        }
    }

    pub fn cross_variate(length: usize, n_vars: usize, seed: u64) -> Self {
        Self {
            kind: SyntheticKind::CrossVariate { phi: 0.95, lags: default_lags(), coupling: 0.8, noise_variates: 0 },
            length,
            n_vars,
            noise: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.length == 0 || self.n_vars == 0 {
            return bad("length and n_vars must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be a finite non-negative number, got {}", self.noise));
        }
        match &self.kind {
            SyntheticKind::Order { phi } if !(phi.abs() < 1.0) => bad(format!("|phi| must be < 1, got {phi}")),
            SyntheticKind::Semantic { cycle, dictionary, amplitude_spread } => {
                if *cycle < 2 {
                    bad(format!("cycle must be >= 2, got {cycle}"))
                } else if !(1..=8).contains(dictionary) {
                    bad(format!("dictionary size must be in 1..=8, got {dictionary}"))
                } else if !(0.0..1.0).contains(amplitude_spread) {
                    bad(format!("amplitude_spread must be in [0, 1), got {amplitude_spread}"))
                } else {
                    Ok(())
                }
            }
            SyntheticKind::CrossVariate { phi, lags, coupling, .. } => {
                if !(phi.abs() < 1.0) {
                    bad(format!("|phi| must be < 1, got {phi}"))
                } else if lags.is_empty() || lags.contains(&0) {
                    bad("lags must be a non-empty list of positive integers".into())
                } else if !(0.0..=1.0).contains(coupling) {
                    bad(format!("coupling must be in [0, 1], got {coupling}"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn generate(&self) -> Result<SeriesTable> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let columns: Vec<Vec<f64>> = match &self.kind {
            SyntheticKind::Order { phi } => {
                (0..self.n_vars).map(|_| ar1(&mut rng, *phi, self.noise, self.length, BURN_IN)).collect()
            }
            SyntheticKind::Semantic { cycle, dictionary, amplitude_spread } => (0..self.n_vars)
                .map(|_| semantic(&mut rng, *cycle, *dictionary, *amplitude_spread, self.noise, self.length))
                .collect(),
            SyntheticKind::CrossVariate { phi, lags, coupling, noise_variates } => {
                let max_lag = *lags.iter().max().expect("validated non-empty");
                let total = self.length + max_lag;
                let driver = ar1(&mut rng, *phi, self.noise, total, BURN_IN);
                let mut cols = vec![driver[max_lag..].to_vec()];
                for i in 1..self.n_vars {
                    let lag = lags[(i - 1) % lags.len()];
                    let own = ar1(&mut rng, *phi, self.noise, self.length, BURN_IN);
                    cols.push(
                        (0..self.length)
                            .map(|t| coupling * driver[max_lag + t - lag] + (1.0 - coupling) * own[t])
                            .collect(),
                    );
                }
                for _ in 0..*noise_variates {
                    cols.push((0..self.length).map(|_| rng.sample(StandardNormal)).collect());
                }
                cols
            }
        };
        let mut names: Vec<String> = (0..self.n_vars).map(|i| format!("v{i}")).collect();
        names.extend((self.n_vars..columns.len()).map(|i| format!("noise{}", i - self.n_vars)));
        let values = (0..self.length).flat_map(|t| columns.iter().map(move |c| c[t])).collect();
        SeriesTable::with_hourly_index(names, values)
    }
}

fn ar1(rng: &mut ChaCha8Rng, phi: f64, noise: f64, length: usize, burn_in: usize) -> Vec<f64> {
    let mut c = 0.0;
    let mut out = Vec::with_capacity(length);
    for t in 0..burn_in + length {
        let eta: f64 = rng.sample(StandardNormal);
        c = phi * c + noise * eta;
        if t >= burn_in {
            out.push(c);
        }
    }
    out
}

/// Waveform `k` of the fixed dictionary at phase `tau` of a cycle of length `c`.
pub fn waveform(k: usize, tau: usize, c: usize) -> f64 {
    let x = tau as f64 / c as f64;
    match k {
        0 => (2.0 * PI * x).sin(),
        1 => {
            if x < 0.5 {
                1.0
            } else {
                -1.0
            }
        }
        2 => 2.0 * x - 1.0,
        3 => (4.0 * PI * x).sin(),
        _ => (2.0 * PI * (k - 2) as f64 * x).cos(),
    }
}

/// Deterministic successor of waveform `k` in a dictionary of size `m`.
pub fn next_template(k: usize, m: usize) -> usize {
    (k + 1 + m / 2) % m
}

fn semantic(rng: &mut ChaCha8Rng, cycle: usize, m: usize, spread: f64, noise: f64, length: usize) -> Vec<f64> {
    let mut k = rng.gen_range(0..m);
    let start = rng.gen_range(0..cycle);
    let mut amp = 1.0 + spread * rng.gen_range(-1.0..1.0);
    let mut out = Vec::with_capacity(length);
    for t in 0..length {
        let tau = (t + start) % cycle;
        if tau == 0 && t > 0 {
            k = next_template(k, m);
            amp = 1.0 + spread * rng.gen_range(-1.0..1.0);
        }
        let eta: f64 = rng.sample(StandardNormal);
        out.push(amp * waveform(k, tau, cycle) + noise * eta);
    }
    out
}
