use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute terms; central
/// differences cannot resolve them to a relative 1e-4 at `h = 1e-5`.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    /// Largest relative error per parameter tensor, in argument order.
    pub max_rel_error: Vec<f64>,
    pub tolerance: f64,
    pub pass: bool,
    /// `(parameter, flat index)` of the overall worst coordinate.
    pub worst: Option<(usize, usize)>,
}

impl CheckReport {
    pub fn worst_error(&self) -> f64 {
        self.max_rel_error.iter().cloned().fold(0.0, f64::max)
    }
}

/// Checks `d f / d params` from one reverse sweep against
/// `(f(p + h e_i) - f(p - h e_i)) / 2h`, coordinate by coordinate.
///
/// Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.
/// `f` receives the graph and one node per parameter and returns a scalar node.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = f(&mut g, &ids)?;
    let base = g.value(loss).item();
    if !base.is_finite() {
        return Err(Error::Evaluation { coordinate: "unperturbed parameters".into() });
    }
    g.backward(loss)?;
    let analytic: Vec<Tensor> =
        ids.iter().zip(params).map(|(&id, p)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()))).collect();

    let eval = |ps: &[Tensor], coord: (usize, usize)| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &ids)?;
        let v = g.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation { coordinate: format!("parameter {} index {}", coord.0, coord.1) })
        }
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel_error = vec![0.0; params.len()];
    let mut worst: Option<(usize, usize)> = None;
    let mut worst_err = -1.0;
    for p in 0..params.len() {
        for i in 0..params[p].numel() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let plus = eval(&work, (p, i))?;
            work[p].data_mut()[i] = orig - h;
            let minus = eval(&work, (p, i))?;
            work[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            if rel > max_rel_error[p] {
                max_rel_error[p] = rel;
            }
            if rel > worst_err {
                worst_err = rel;
                worst = Some((p, i));
            }
        }
    }
    let pass = max_rel_error.iter().all(|&e| e <= tol);
    Ok(CheckReport { max_rel_error, tolerance: tol, pass, worst })
}
