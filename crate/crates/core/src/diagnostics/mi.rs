use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_SAMPLES: usize = 1000;
pub const DEFAULT_BINS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    /// Estimate in nats, clamped at zero.
    pub nats: f64,
    /// Unclamped plug-in value.
    pub raw: f64,
    pub bins: usize,
    pub samples: usize,
}

/// Equal-frequency bin index for every value. Edges are the `k * n / bins`
/// order statistics; a value's bin is the number of edges at or below it,
/// so tied values always share a bin.
pub fn quantile_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let edges: Vec<f64> = (1..bins).map(|k| sorted[k * n / bins]).collect();
    values.iter().map(|v| edges.partition_point(|e| e <= v)).collect()
}

fn entropy<K: std::hash::Hash + Eq>(keys: impl Iterator<Item = K>, n: usize) -> f64 {
    let mut counts: HashMap<K, usize> = HashMap::new();
    for k in keys {
        *counts.entry(k).or_default() += 1;
    }
    // Sum in a canonical order so the result does not depend on hash order.
    let mut c: Vec<usize> = counts.into_values().collect();
    c.sort_unstable();
    let n = n as f64;
    -c.iter().map(|&k| {
        let p = k as f64 / n;
        p * p.ln()
    }).sum::<f64>()
}

/// A variable of dimension 1 or 2, binned per dimension.
pub type Variable<'a> = &'a [&'a [f64]];

fn bin_variable(v: Variable, bins: usize, n: usize) -> Result<Vec<Vec<usize>>> {
    if v.is_empty() || v.len() > 2 {
        return Err(Error::InvalidInput { op: "mi_plugin", detail: format!("variables must have 1 or 2 dimensions, got {}", v.len()) });
    }
    v.iter()
        .map(|d| {
            if d.len() != n {
                Err(Error::dim("mi_plugin", format!("dimension of length {} vs {n} samples", d.len())))
            } else {
                Ok(quantile_bins(d, bins))
            }
        })
        .collect()
}

fn check(n: usize, bins: usize) -> Result<()> {
    if n < MIN_SAMPLES {
        return Err(Error::InsufficientSamples { got: n, need: MIN_SAMPLES });
    }
    if bins < 2 {
        return Err(Error::InvalidInput { op: "mi_plugin", detail: "need at least 2 bins".into() });
    }
    Ok(())
}

fn key(parts: &[&Vec<Vec<usize>>], i: usize) -> Vec<usize> {
    parts.iter().flat_map(|p| p.iter().map(move |d| d[i])).collect()
}

fn joint_entropy(parts: &[&Vec<Vec<usize>>], n: usize) -> f64 {
    entropy((0..n).map(|i| key(parts, i)), n)
}

/// Plug-in mutual information between two binned variables.
pub fn mi_plugin_nd(x: Variable, y: Variable, bins: usize) -> Result<MiEstimate> {
    let n = x.first().map_or(0, |d| d.len());
    check(n, bins)?;
    let (bx, by) = (bin_variable(x, bins, n)?, bin_variable(y, bins, n)?);
    let raw = joint_entropy(&[&bx], n) + joint_entropy(&[&by], n) - joint_entropy(&[&bx, &by], n);
    Ok(MiEstimate { nats: raw.max(0.0), raw, bins, samples: n })
}

pub fn mi_plugin(x: &[f64], y: &[f64], bins: usize) -> Result<MiEstimate> {
    mi_plugin_nd(&[x], &[y], bins)
}

/// Plug-in conditional mutual information `I(X; Y | Z)`.
pub fn cmi_plugin_nd(x: Variable, y: Variable, z: Variable, bins: usize) -> Result<MiEstimate> {
    let n = x.first().map_or(0, |d| d.len());
    check(n, bins)?;
    let (bx, by, bz) = (bin_variable(x, bins, n)?, bin_variable(y, bins, n)?, bin_variable(z, bins, n)?);
    let raw = joint_entropy(&[&bx, &bz], n) + joint_entropy(&[&by, &bz], n)
        - joint_entropy(&[&bx, &by, &bz], n)
        - joint_entropy(&[&bz], n);
    Ok(MiEstimate { nats: raw.max(0.0), raw, bins, samples: n })
}

pub fn cmi_plugin(x: &[f64], y: &[f64], z: &[f64], bins: usize) -> Result<MiEstimate> {
    cmi_plugin_nd(&[x], &[y], &[z], bins)
}

/// Plug-in conditional entropy `H(Y | X)`.
pub fn conditional_entropy(y: Variable, x: Variable, bins: usize) -> Result<f64> {
    let n = y.first().map_or(0, |d| d.len());
    check(n, bins)?;
    let (by, bx) = (bin_variable(y, bins, n)?, bin_variable(x, bins, n)?);
    Ok(joint_entropy(&[&by, &bx], n) - joint_entropy(&[&bx], n))
}
