//! Raw numeric loops shared by the forward and backward passes.
//!
//! Every reduction runs sequentially over the row-major index, so results are
//! bit-reproducible for identical inputs.

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        let o = &mut out[i * n..(i + 1) * n];
        for (p, &av) in row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]` (gradient w.r.t. the left operand).
pub(crate) fn matmul_grad_lhs(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            out[i * k + p] += s;
        }
    }
}

/// `out[k,n] += a[m,k] * g[m,n]` (gradient w.r.t. the right operand).
pub(crate) fn matmul_grad_rhs(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let o = &mut out[p * n..(p + 1) * n];
            for (ov, &gv) in o.iter_mut().zip(grow) {
                *ov += av * gv;
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Swaps axes `ax0 < ax1`; returns the permuted data. Applying it twice is the identity.
pub(crate) fn swap_axes(data: &[f64], shape: &[usize], ax0: usize, ax1: usize) -> Vec<f64> {
    debug_assert!(ax0 < ax1);
    let p: usize = shape[..ax0].iter().product();
    let a = shape[ax0];
    let q: usize = shape[ax0 + 1..ax1].iter().product();
    let b = shape[ax1];
    let r: usize = shape[ax1 + 1..].iter().product();
    let mut out = vec![0.0; data.len()];
    // input layout [p, a, q, b, r] -> output layout [p, b, q, a, r]
    for ip in 0..p {
        for ia in 0..a {
            for iq in 0..q {
                for ib in 0..b {
                    let src = (((ip * a + ia) * q + iq) * b + ib) * r;
                    let dst = (((ip * b + ib) * q + iq) * a + ia) * r;
                    out[dst..dst + r].copy_from_slice(&data[src..src + r]);
                }
            }
        }
    }
    out
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(width).zip(out.chunks_mut(width)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (ov, &v) in o.iter_mut().zip(row) {
            *ov = (v - m).exp();
            s += *ov;
        }
        for ov in o.iter_mut() {
            *ov /= s;
        }
    }
    out
}

/// Row statistics for layer normalization: (mean, 1/sqrt(var + eps)), population variance.
pub(crate) fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Depthwise causal convolution along the sequence axis.
///
/// `x` is `[rows, len, ch]`, `w` is `[k, ch]`; tap `j` multiplies the input `j`
/// steps in the past, with implicit zeros before the start of the sequence.
pub(crate) fn causal_conv(x: &[f64], w: &[f64], rows: usize, len: usize, ch: usize, k: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for r in 0..rows {
        let base = r * len * ch;
        for t in 0..len {
            let yo = base + t * ch;
            for j in 0..k.min(t + 1) {
                let xo = base + (t - j) * ch;
                let wo = j * ch;
                for c in 0..ch {
                    y[yo + c] += w[wo + c] * x[xo + c];
                }
            }
        }
    }
    y
}

/// Zero-order-hold factors for one (step, pole) pair.
///
/// Returns `(exp(delta*a), (exp(delta*a) - 1) / a)`; the second factor falls back
/// to its `a -> 0` limit `delta` when `|a| < 1e-8`.
pub(crate) fn zoh(delta: f64, a: f64) -> (f64, f64) {
    let abar = (delta * a).exp();
    let f = if a.abs() < ZOH_FALLBACK { delta } else { (delta * a).exp_m1() / a };
    (abar, f)
}

pub(crate) const ZOH_FALLBACK: f64 = 1e-8;

/// Partial derivatives of the input factor `f(delta, a) = expm1(delta*a)/a`.
fn zoh_grad(delta: f64, a: f64, abar: f64) -> (f64, f64) {
    if a.abs() < ZOH_FALLBACK {
        return (1.0, 0.5 * delta * delta);
    }
    let z = delta * a;
    let df_da = if z.abs() < 1e-3 {
        let d2 = delta * delta;
        d2 * (0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0)
    } else {
        (z * abar - z.exp_m1()) / (a * a)
    };
    (abar, df_da)
}

/// Shapes for the fused selective scan: `groups` independent sequences of
/// length `len` with `ch` channels and `state` poles per channel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ScanDims {
    pub groups: usize,
    pub len: usize,
    pub ch: usize,
    pub state: usize,
}

/// Forward selective scan. Returns `(y, states)` where `states[g,t,d,h]` is `h_t`.
pub(crate) fn scan_forward(
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    dims: ScanDims,
) -> (Vec<f64>, Vec<f64>) {
    let ScanDims { groups, len, ch, state } = dims;
    let mut y = vec![0.0; groups * len * ch];
    let mut states = vec![0.0; groups * len * ch * state];
    let mut h = vec![0.0; ch * state];
    for g in 0..groups {
        h.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..len {
            let row = g * len + t;
            let bt = &b[row * state..(row + 1) * state];
            let ct = &c[row * state..(row + 1) * state];
            for d in 0..ch {
                let dt = delta[row * ch + d];
                let ut = u[row * ch + d];
                let hd = &mut h[d * state..(d + 1) * state];
                let ad = &a[d * state..(d + 1) * state];
                let mut acc = 0.0;
                for s in 0..state {
                    let (abar, f) = zoh(dt, ad[s]);
                    hd[s] = abar * hd[s] + f * bt[s] * ut;
                    acc += ct[s] * hd[s];
                }
                y[row * ch + d] = acc;
            }
            let so = row * ch * state;
            states[so..so + ch * state].copy_from_slice(&h);
        }
    }
    (y, states)
}

pub(crate) struct ScanGrads {
    pub du: Vec<f64>,
    pub ddelta: Vec<f64>,
    pub da: Vec<f64>,
    pub db: Vec<f64>,
    pub dc: Vec<f64>,
}

/// Reverse-time adjoint of [`scan_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward(
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    states: &[f64],
    dy: &[f64],
    dims: ScanDims,
) -> ScanGrads {
    let ScanDims { groups, len, ch, state } = dims;
    let mut gr = ScanGrads {
        du: vec![0.0; u.len()],
        ddelta: vec![0.0; delta.len()],
        da: vec![0.0; a.len()],
        db: vec![0.0; b.len()],
        dc: vec![0.0; c.len()],
    };
    let mut carry = vec![0.0; ch * state];
    for g in 0..groups {
        carry.iter_mut().for_each(|v| *v = 0.0);
        for t in (0..len).rev() {
            let row = g * len + t;
            let bt = &b[row * state..(row + 1) * state];
            let ct = &c[row * state..(row + 1) * state];
            let h_now = &states[row * ch * state..(row + 1) * ch * state];
            let h_prev = (t > 0).then(|| &states[(row - 1) * ch * state..row * ch * state]);
            for d in 0..ch {
                let dt = delta[row * ch + d];
                let ut = u[row * ch + d];
                let gy = dy[row * ch + d];
                let mut du = 0.0;
                let mut ddelta = 0.0;
                for s in 0..state {
                    let i = d * state + s;
                    let av = a[i];
                    let dh = carry[i] + ct[s] * gy;
                    gr.dc[row * state + s] += gy * h_now[i];
                    let hp = h_prev.map_or(0.0, |p| p[i]);
                    let (abar, f) = zoh(dt, av);
                    let (df_dd, df_da) = zoh_grad(dt, av, abar);
                    let d_abar = dh * hp;
                    let d_f = dh * bt[s] * ut;
                    du += dh * f * bt[s];
                    gr.db[row * state + s] += dh * f * ut;
                    ddelta += d_abar * abar * av + d_f * df_dd;
                    gr.da[i] += d_abar * abar * dt + d_f * df_da;
                    carry[i] = dh * abar;
                }
                gr.du[row * ch + d] += du;
                gr.ddelta[row * ch + d] += ddelta;
            }
        }
    }
    gr
}
