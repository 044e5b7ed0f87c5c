use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mi::{conditional_entropy, mi_plugin};
use crate::data::{SyntheticKind, SyntheticSpec};
use crate::error::Result;
use crate::model::random_perm;

/// Gain in nats above which a dependency counts as present.
pub const SIGNIFICANCE_NATS: f64 = 0.05;
pub const SIGNIFICANCE_BINS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependencyCheck {
    pub dependency: String,
    /// How the defining inequality is measured on samples.
    pub proxy: String,
    pub without: f64,
    pub with: f64,
    /// Information gained by the dependency, in nats.
    pub gain: f64,
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub spec: SyntheticSpec,
    pub bins: usize,
    pub samples: usize,
    pub checks: Vec<DependencyCheck>,
}

fn check(dependency: &str, proxy: String, without: f64, with: f64) -> DependencyCheck {
    let gain = with - without;
    DependencyCheck { dependency: dependency.into(), proxy, without, with, gain, significant: gain > SIGNIFICANCE_NATS }
}

/// MI between `c_t` and `c_{t+lag}` against MI of the same values with the
/// pairing scrambled in time.
fn lagged_vs_scrambled(c: &[f64], lag: usize, bins: usize, seed: u64) -> Result<(f64, f64)> {
    let n = c.len() - lag;
    let (x, y) = (&c[..n], &c[lag..]);
    let perm = random_perm(n, &mut ChaCha8Rng::seed_from_u64(seed));
    let scrambled: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
    Ok((mi_plugin(x, &scrambled, bins)?.nats, mi_plugin(x, y, bins)?.nats))
}

/// Generates the dataset and checks the dependency its kind is built to carry.
pub fn dependency_significance(spec: &SyntheticSpec, bins: usize) -> Result<SignificanceReport> {
    let table = spec.generate()?;
    let samples = table.rows();
    let mut checks = Vec::new();
    match &spec.kind {
        SyntheticKind::Order { .. } => {
            for v in 0..spec.n_vars {
                let (without, with) = lagged_vs_scrambled(&table.column(v), 1, bins, spec.seed)?;
                let proxy = format!("variate {v}: I(c_t; c_t+1) with ordered pairs vs time-scrambled pairs");
                checks.push(check("order", proxy, without, with));
            }
        }
        SyntheticKind::Semantic { cycle, .. } => {
            for v in 0..spec.n_vars {
                let (without, with) = lagged_vs_scrambled(&table.column(v), *cycle, bins, spec.seed)?;
                let proxy = format!("variate {v}: I(c_t; c_t+{cycle}) one cycle apart vs time-scrambled pairs");
                checks.push(check("semantic", proxy, without, with));
            }
        }
        SyntheticKind::CrossVariate { lags, .. } => {
            let driver = table.column(0);
            for i in 1..spec.n_vars {
                let lag = lags[(i - 1) % lags.len()];
                let c = table.column(i);
                let (future, own) = (&c[lag..], &c[lag - 1..c.len() - 1]);
                let other = &driver[..c.len() - lag];
                let h_own = conditional_entropy(&[future], &[own], bins)?;
                let h_both = conditional_entropy(&[future], &[own, other], bins)?;
                let proxy = format!(
                    "variate {i}: H(c^{i}_t | c^{i}_t-1) minus H(c^{i}_t | c^{i}_t-1, c^0_t-{lag}); 'without' and 'with' are the two entropies negated"
                );
                checks.push(check("cross_variate", proxy, -h_own, -h_both));
            }
        }
    }
    Ok(SignificanceReport { spec: spec.clone(), bins, samples, checks })
}
