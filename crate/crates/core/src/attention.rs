//! Single-layer self-attention encoder used as an alternative backbone.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, Ffn, LayerNorm, Linear, ParamStore};
use crate::tensor::{Graph, NodeId};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize) -> Self {
        Self { d_model, n_heads, d_ff: d_model }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config(format!("attention needs positive sizes, got {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads = {} does not divide d_model = {}",
                self.n_heads, self.d_model
            )));
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        let d = self.d_model;
        3 * (d * d + d) + (d * self.d_ff + self.d_ff) + (self.d_ff * d + d) + 4 * d
    }
}

/// `h = LN(Attn(x) + x)`, `y = LN(FFN(h) + h)`; no positional information.
#[derive(Clone, Debug)]
pub struct AttentionEncoder {
    pub cfg: AttentionConfig,
    q: Linear,
    k: Linear,
    v: Linear,
    norm1: LayerNorm,
    ffn: Ffn,
    norm2: LayerNorm,
}

impl AttentionEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let q = Linear::new(store, rng, &format!("{name}.q"), d, d, true);
        let k = Linear::new(store, rng, &format!("{name}.k"), d, d, true);
        let v = Linear::new(store, rng, &format!("{name}.v"), d, d, true);
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), d);
        let ffn = Ffn::new(store, rng, &format!("{name}.ffn"), (d, cfg.d_ff, d), Activation::Silu);
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), d);
        Ok(Self { cfg, q, k, v, norm1, ffn, norm2 })
    }

    fn heads(&self, g: &mut Graph, x: NodeId, groups: usize, len: usize) -> Result<NodeId> {
        let h = self.cfg.n_heads;
        let dh = self.cfg.d_model / h;
        let r = g.reshape(x, &[groups, len, h, dh])?;
        let t = g.transpose(r, 1, 2)?;
        g.reshape(t, &[groups * h, len, dh])
    }

    /// Softmax attention weights, `[G * heads, L, L]`.
    pub fn weights(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        let (groups, len) = self.check(g, x)?;
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let q = self.heads(g, q, groups, len)?;
        let k = self.heads(g, k, groups, len)?;
        let kt = g.transpose(k, 1, 2)?;
        let scores = g.matmul(q, kt)?;
        let dh = (self.cfg.d_model / self.cfg.n_heads) as f64;
        let scores = g.scale(scores, 1.0 / dh.sqrt());
        Ok(g.softmax(scores))
    }

    fn check(&self, g: &Graph, x: NodeId) -> Result<(usize, usize)> {
        let s = g.shape(x);
        if s.len() != 3 || s[2] != self.cfg.d_model {
            return Err(Error::dim("attention_encoder", format!("expected [G, L, {}], got {s:?}", self.cfg.d_model)));
        }
        Ok((s[0], s[1]))
    }

    /// `x: [G, L, D]` -> `[G, L, D]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        let (groups, len) = self.check(g, x)?;
        let w = self.weights(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let v = self.heads(g, v, groups, len)?;
        let att = g.matmul(w, v)?;
        let dh = self.cfg.d_model / self.cfg.n_heads;
        let att = g.reshape(att, &[groups, self.cfg.n_heads, len, dh])?;
        let att = g.transpose(att, 1, 2)?;
        let att = g.reshape(att, &[groups, len, self.cfg.d_model])?;
        let r1 = g.add(att, x)?;
        let h1 = self.norm1.forward(g, p, r1)?;
        let f = self.ffn.forward(g, p, h1)?;
        let r2 = g.add(f, h1)?;
        self.norm2.forward(g, p, r2)
    }
}
