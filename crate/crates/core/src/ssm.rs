//! Selective state-space machinery: zero-order-hold discretization, the
//! input-dependent selection of `(B, C, delta)`, the recurrent scan, and the
//! Mamba block in its vanilla and simplified forms.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{uniform, Activation, Bound, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Graph, NodeId, Tensor};

/// Below this magnitude a pole is treated as zero and `Bbar = delta * B`.
pub const NEAR_ZERO_POLE: f64 = 1e-8;

/// Initial step size after softplus.
pub const INIT_STEP: f64 = 0.1;

/// Zero-order-hold discretization for one time step.
///
/// `a` is `[D, H]` (one row of poles per channel), `b_t` has `H` entries and
/// `delta_t` has `D`. Returns `(Abar, Bbar)`, both `[D, H]`:
/// `Abar = exp(delta_d a_dh)`, `Bbar = (exp(delta_d a_dh) - 1) / a_dh * b_h`.
pub fn discretize(a: &Tensor, b_t: &[f64], delta_t: &[f64]) -> Result<(Tensor, Tensor)> {
    let s = a.shape();
    if s.len() != 2 || s[0] != delta_t.len() || s[1] != b_t.len() {
        return Err(Error::dim(
            "discretize",
            format!("A {s:?}, B {} entries, delta {} entries", b_t.len(), delta_t.len()),
        ));
    }
    let (d, h) = (s[0], s[1]);
    let mut abar = Vec::with_capacity(d * h);
    let mut bbar = Vec::with_capacity(d * h);
    for (i, &dt) in delta_t.iter().enumerate() {
        for (j, &bt) in b_t.iter().enumerate() {
            let av = a.data()[i * h + j];
            let z = dt * av;
            abar.push(z.exp());
            let f = if av.abs() < NEAR_ZERO_POLE { dt } else { z.exp_m1() / av };
            bbar.push(f * bt);
        }
    }
    Ok((Tensor::from_parts(vec![d, h], abar), Tensor::from_parts(vec![d, h], bbar)))
}

/// Input-dependent SSM coefficients for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub delta: Vec<f64>,
}

/// Standalone selective-SSM parameter bundle.
///
/// `a` is `[D, H]` with strictly negative entries; `w_b`, `w_c` map `D -> H`
/// and `w_delta` maps `D -> D`, each with a bias.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveSsmParams {
    pub a: Tensor,
    pub w_b: Tensor,
    pub b_b: Tensor,
    pub w_c: Tensor,
    pub b_c: Tensor,
    pub w_delta: Tensor,
    pub b_delta: Tensor,
}

impl SelectiveSsmParams {
    pub fn new(
        a: Tensor,
        (w_b, b_b): (Tensor, Tensor),
        (w_c, b_c): (Tensor, Tensor),
        (w_delta, b_delta): (Tensor, Tensor),
    ) -> Result<Self> {
        let p = Self { a, w_b, b_b, w_c, b_c, w_delta, b_delta };
        p.validate()?;
        Ok(p)
    }

    /// Pole ladder `A[d, h] = -(h + 1)`, random projections, step bias with
    /// `softplus(bias) = 0.1`.
    pub fn init(d_model: usize, d_state: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (d_model as f64).sqrt();
        let a = Tensor::from_parts(
            vec![d_model, d_state],
            (0..d_model).flat_map(|_| (1..=d_state).map(|h| -(h as f64))).collect(),
        );
        Self {
            a,
            w_b: uniform(rng, &[d_model, d_state], bound),
            b_b: uniform(rng, &[d_state], bound),
            w_c: uniform(rng, &[d_model, d_state], bound),
            b_c: uniform(rng, &[d_state], bound),
            w_delta: uniform(rng, &[d_model, d_model], bound),
            b_delta: Tensor::full(vec![d_model], inverse_softplus(INIT_STEP)),
        }
    }

    fn validate(&self) -> Result<()> {
        let s = self.a.shape();
        if s.len() != 2 {
            return Err(Error::dim("selective_ssm", format!("A must be [D, H], got {s:?}")));
        }
        let (d, h) = (s[0], s[1]);
        let expect: [(&Tensor, &[usize]); 6] = [
            (&self.w_b, &[d, h]),
            (&self.b_b, &[h]),
            (&self.w_c, &[d, h]),
            (&self.b_c, &[h]),
            (&self.w_delta, &[d, d]),
            (&self.b_delta, &[d]),
        ];
        for (t, want) in expect {
            if t.shape() != want {
                return Err(Error::dim("selective_ssm", format!("expected {want:?}, got {:?}", t.shape())));
            }
        }
        if self.a.data().iter().any(|&v| !(v < 0.0)) {
            return Err(Error::InvalidInput { op: "selective_ssm", detail: "A must be strictly negative".into() });
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_state(&self) -> usize {
        self.a.shape()[1]
    }

    /// `B = x W_B + b_B`, `C = x W_C + b_C`, `delta = softplus(x W_delta + b_delta)`.
    pub fn selection(&self, x_t: &[f64]) -> Result<Selection> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, x_t.len()], x_t.to_vec())?);
        let nodes = self.bind(&mut g, false);
        let (b, c, delta) = select(&mut g, x, &nodes)?;
        Ok(Selection {
            b: g.value(b).data().to_vec(),
            c: g.value(c).data().to_vec(),
            delta: g.value(delta).data().to_vec(),
        })
    }

    /// Runs the selective SSM over `u: [T, D]` from a zero state.
    pub fn scan(&self, u: &Tensor) -> Result<Tensor> {
        if u.rank() != 2 {
            return Err(Error::dim("selective_scan", format!("expected [T, D], got {:?}", u.shape())));
        }
        let mut g = Graph::new();
        let ui = g.constant(u.clone().reshape(vec![1, u.shape()[0], u.shape()[1]])?);
        let nodes = self.bind(&mut g, false);
        let y = selective_ssm(&mut g, ui, &nodes)?;
        g.value(y).clone().reshape(u.shape().to_vec())
    }

    /// Registers the bundle in `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> SsmNodes {
        let mut put = |t: &Tensor| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) };
        SsmNodes {
            a: put(&self.a),
            w_b: put(&self.w_b),
            b_b: put(&self.b_b),
            w_c: put(&self.w_c),
            b_c: put(&self.b_c),
            w_delta: put(&self.w_delta),
            b_delta: put(&self.b_delta),
        }
    }
}

pub(crate) fn inverse_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

/// Graph handles for a selective SSM's parameters; `a` holds the poles themselves.
#[derive(Clone, Copy, Debug)]
pub struct SsmNodes {
    pub a: NodeId,
    pub w_b: NodeId,
    pub b_b: NodeId,
    pub w_c: NodeId,
    pub b_c: NodeId,
    pub w_delta: NodeId,
    pub b_delta: NodeId,
}

fn select(g: &mut Graph, x: NodeId, n: &SsmNodes) -> Result<(NodeId, NodeId, NodeId)> {
    let b = g.linear(x, n.w_b, Some(n.b_b))?;
    let c = g.linear(x, n.w_c, Some(n.b_c))?;
    let pre = g.linear(x, n.w_delta, Some(n.b_delta))?;
    let delta = g.softplus(pre);
    Ok((b, c, delta))
}

/// Selection followed by the scan, for `u: [G, L, D]`.
pub fn selective_ssm(g: &mut Graph, u: NodeId, n: &SsmNodes) -> Result<NodeId> {
    let (b, c, delta) = select(g, u, n)?;
    g.selective_scan(u, delta, n.a, b, c)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MambaBlockConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub d_conv: usize,
    /// Inner width multiplier; values above 1 add an output projection.
    #[serde(default = "one")]
    pub expand: usize,
    /// Removes the activation between the convolution and the scan.
    pub simplified: bool,
    #[serde(default)]
    pub gate_activation: Activation,
    #[serde(default)]
    pub branch_activation: Activation,
}

fn one() -> usize {
    1
}

impl MambaBlockConfig {
    pub fn new(d_model: usize, d_state: usize, d_conv: usize, simplified: bool) -> Self {
        Self {
            d_model,
            d_state,
            d_conv,
            expand: 1,
            simplified,
            gate_activation: Activation::Silu,
            branch_activation: Activation::Silu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_state == 0 || self.d_conv == 0 || self.expand == 0 {
            return Err(Error::Config(format!("mamba block needs positive sizes, got {self:?}")));
        }
        Ok(())
    }

    /// Activation actually applied between the convolution and the scan.
    pub fn effective_branch_activation(&self) -> Activation {
        if self.simplified {
            Activation::Identity
        } else {
            self.branch_activation
        }
    }

    pub fn inner(&self) -> usize {
        self.d_model * self.expand
    }

    /// Number of scalar parameters the block allocates.
    pub fn num_scalars(&self) -> usize {
        let (d, e, h, k) = (self.d_model, self.inner(), self.d_state, self.d_conv);
        let in_proj = d * e + e;
        let conv = k * e + e;
        let sel = 2 * (e * h + h) + e * e + e;
        let a = e * h;
        let gate = d * e + e;
        let out = if self.expand > 1 { e * d + d } else { 0 };
        let norm = 2 * d;
        in_proj + conv + sel + a + gate + out + norm
    }
}

/// One Mamba layer:
/// `x' = SSM(act(Conv1D(Linear(x))))`, `y = LayerNorm(x' * gate(Linear(x)) + x)`,
/// with `act` the identity when simplified.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub cfg: MambaBlockConfig,
    in_proj: Linear,
    conv_w: ParamId,
    conv_b: ParamId,
    proj_b: Linear,
    proj_c: Linear,
    proj_delta: Linear,
    a_log: ParamId,
    gate: Linear,
    out_proj: Option<Linear>,
    norm: LayerNorm,
}

impl MambaBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: MambaBlockConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, e, h, k) = (cfg.d_model, cfg.inner(), cfg.d_state, cfg.d_conv);
        let in_proj = Linear::new(store, rng, &format!("{name}.in_proj"), d, e, true);
        let cb = 1.0 / (k as f64).sqrt();
        let conv_w = store.add(format!("{name}.conv.w"), uniform(rng, &[k, e], cb));
        let conv_b = store.add(format!("{name}.conv.b"), uniform(rng, &[e], cb));
        let proj_b = Linear::new(store, rng, &format!("{name}.x_proj_b"), e, h, true);
        let proj_c = Linear::new(store, rng, &format!("{name}.x_proj_c"), e, h, true);
        let proj_delta = Linear::new(store, rng, &format!("{name}.dt_proj"), e, e, true);
        if let Some(b) = proj_delta.b {
            *store.get_mut(b) = Tensor::full(vec![e], inverse_softplus(INIT_STEP));
        }
        // A = -exp(a_log) keeps every pole strictly negative during training.
        let a_log = store.add(
            format!("{name}.a_log"),
            Tensor::from_parts(vec![e, h], (0..e).flat_map(|_| (1..=h).map(|j| (j as f64).ln())).collect()),
        );
        let gate = Linear::new(store, rng, &format!("{name}.gate"), d, e, true);
        let out_proj = (cfg.expand > 1).then(|| Linear::new(store, rng, &format!("{name}.out_proj"), e, d, true));
        let norm = LayerNorm::new(store, &format!("{name}.norm"), d);
        Ok(Self { cfg, in_proj, conv_w, conv_b, proj_b, proj_c, proj_delta, a_log, gate, out_proj, norm })
    }

    pub fn a_log(&self) -> ParamId {
        self.a_log
    }

    /// `x: [G, L, D]` -> `[G, L, D]`; every group is an independent sequence.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        let s = g.shape(x);
        if s.len() != 3 || s[2] != self.cfg.d_model {
            return Err(Error::dim("mamba_block", format!("expected [G, L, {}], got {s:?}", self.cfg.d_model)));
        }
        let xi = self.in_proj.forward(g, p, x)?;
        let conv = g.causal_conv(xi, p[self.conv_w])?;
        let conv = g.add(conv, p[self.conv_b])?;
        let u = self.cfg.effective_branch_activation().apply(g, conv);
        let ea = g.exp(p[self.a_log]);
        let a = g.scale(ea, -1.0);
        let nodes = SsmNodes {
            a,
            w_b: p[self.proj_b.w],
            b_b: p[self.proj_b.b.expect("bias")],
            w_c: p[self.proj_c.w],
            b_c: p[self.proj_c.b.expect("bias")],
            w_delta: p[self.proj_delta.w],
            b_delta: p[self.proj_delta.b.expect("bias")],
        };
        let y = selective_ssm(g, u, &nodes)?;
        let gate = self.gate.forward(g, p, x)?;
        let gate = self.cfg.gate_activation.apply(g, gate);
        let mut m = g.mul(y, gate)?;
        if let Some(out) = &self.out_proj {
            m = out.forward(g, p, m)?;
        }
        let r = g.add(m, x)?;
        self.norm.forward(g, p, r)
    }

    /// Convenience wrapper for a single sequence `x: [L, D]`.
    pub fn forward_seq(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("mamba_block", format!("expected [L, D], got {s:?}")));
        }
        let x3 = g.reshape(x, &[1, s[0], s[1]])?;
        let y = self.forward(g, p, x3)?;
        g.reshape(y, &s)
    }
}
