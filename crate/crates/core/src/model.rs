//! The disentangled forecaster, its ablation variants, and the simple baselines
//! used by the probes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionEncoder};
use crate::error::{Error, Result};
use crate::nn::{uniform, Activation, Bound, Ffn, LayerNorm, Linear, ParamId, ParamStore};
use crate::ssm::{MambaBlock, MambaBlockConfig};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub stride: usize,
}

impl PatchConfig {
    pub fn new(patch_len: usize, stride: usize) -> Self {
        Self { patch_len, stride }
    }

    /// `J = floor((T - P) / stride) + 1`.
    pub fn num_patches(&self, lookback: usize) -> Result<usize> {
        if self.patch_len == 0 || self.stride == 0 {
            return Err(Error::Config(format!("patch length and stride must be positive, got {self:?}")));
        }
        if self.patch_len > lookback {
            return Err(Error::Config(format!(
                "patch length {} exceeds lookback {lookback}",
                self.patch_len
            )));
        }
        Ok((lookback - self.patch_len) / self.stride + 1)
    }

    /// Time indices covered by the patches, patch-major.
    pub fn indices(&self, lookback: usize) -> Result<Vec<usize>> {
        let j = self.num_patches(lookback)?;
        Ok((0..j).flat_map(|p| (0..self.patch_len).map(move |k| p * self.stride + k)).collect())
    }

    /// `[.., T]` -> `[.., J, P]`; trailing samples not covered by a full patch are dropped.
    pub fn patchify_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let s = g.shape(x).to_vec();
        let t = *s.last().ok_or_else(|| Error::dim("patchify", "rank-0 input".to_string()))?;
        let idx = self.indices(t)?;
        let gathered = g.gather(x, s.len() - 1, &idx)?;
        let mut shape = s[..s.len() - 1].to_vec();
        shape.extend([idx.len() / self.patch_len, self.patch_len]);
        g.reshape(gathered, &shape)
    }

    pub fn patchify(&self, series: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(series.clone());
        let p = self.patchify_node(&mut g, x)?;
        Ok(g.value(p).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    SMamba,
    Mamba,
    Attention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantTag {
    Full,
    NoTimeBranch,
    NoVariateBranch,
    VanillaActivation,
    TimeThenVariate,
}

impl VariantTag {
    pub fn has_time_branch(self) -> bool {
        self != VariantTag::NoTimeBranch
    }

    pub fn has_variate_branch(self) -> bool {
        self != VariantTag::NoVariateBranch
    }
}

/// How the variate order is permuted before the variate branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum PermutationPolicy {
    /// Fresh uniform permutation per training batch, identity at evaluation.
    #[default]
    PerBatch,
    /// One permutation drawn from `seed`, used for training and evaluation.
    Fixed { seed: u64 },
    /// Fresh permutation per training batch; evaluation averages `k` permutations.
    Average { k: usize },
    Identity,
}

impl PermutationPolicy {
    /// Permutation for one training batch.
    pub fn train_perm(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        match *self {
            PermutationPolicy::PerBatch | PermutationPolicy::Average { .. } => random_perm(n, rng),
            PermutationPolicy::Fixed { seed } => random_perm(n, &mut ChaCha8Rng::seed_from_u64(seed)),
            PermutationPolicy::Identity => (0..n).collect(),
        }
    }

    /// Permutations whose predictions are averaged at evaluation.
    pub fn eval_perms(&self, n: usize) -> Vec<Vec<usize>> {
        match *self {
            PermutationPolicy::PerBatch | PermutationPolicy::Identity => vec![(0..n).collect()],
            PermutationPolicy::Fixed { seed } => vec![random_perm(n, &mut ChaCha8Rng::seed_from_u64(seed))],
            PermutationPolicy::Average { k } => {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                (0..k.max(1)).map(|_| random_perm(n, &mut rng)).collect()
            }
        }
    }
}

pub fn random_perm(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

pub fn invert_perm(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (k, &i) in p.iter().enumerate() {
        inv[i] = k;
    }
    inv
}

fn default_depth() -> usize {
    1
}

fn default_heads() -> usize {
    4
}

fn default_conv() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub d_model: usize,
    pub d_state: usize,
    #[serde(default = "default_conv")]
    pub d_conv: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    pub variant: VariantTag,
    pub backbone: Backbone,
    #[serde(default)]
    pub permutation: PermutationPolicy,
}

impl Default for SdeConfig {
    fn default() -> Self {
        Self {
            lookback: 96,
            horizon: 96,
            patch_len: 16,
            stride: 8,
            d_model: 32,
            d_state: 16,
            d_conv: 4,
            n_heads: 4,
            depth: 1,
            variant: VariantTag::Full,
            backbone: Backbone::SMamba,
            permutation: PermutationPolicy::PerBatch,
        }
    }
}

impl SdeConfig {
    pub fn patch(&self) -> PatchConfig {
        PatchConfig::new(self.patch_len, self.stride)
    }

    pub fn num_patches(&self) -> Result<usize> {
        self.patch().num_patches(self.lookback)
    }

    pub fn validate(&self) -> Result<()> {
        self.num_patches()?;
        if self.horizon == 0 || self.d_model == 0 || self.depth == 0 {
            return Err(Error::Config("horizon, d_model and depth must be positive".into()));
        }
        if self.variant == VariantTag::VanillaActivation && self.backbone == Backbone::Attention {
            return Err(Error::Config("vanilla_activation requires a Mamba backbone".into()));
        }
        match self.backbone {
            Backbone::Attention => self.attention_config().validate(),
            _ => self.mamba_config().validate(),
        }
    }

    pub fn mamba_config(&self) -> MambaBlockConfig {
        let simplified = self.backbone == Backbone::SMamba && self.variant != VariantTag::VanillaActivation;
        MambaBlockConfig::new(self.d_model, self.d_state, self.d_conv, simplified)
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig::new(self.d_model, self.n_heads)
    }

    fn block_scalars(&self) -> usize {
        match self.backbone {
            Backbone::Attention => self.attention_config().num_scalars(),
            _ => self.mamba_config().num_scalars(),
        }
    }

    /// Closed-form parameter count.
    pub fn num_scalars(&self) -> Result<usize> {
        let (d, p, s) = (self.d_model, self.patch_len, self.horizon);
        let j = self.num_patches()?;
        let block = self.block_scalars() * self.depth;
        let mut n = p * d + d + j * d * s + s;
        if self.variant.has_time_branch() {
            n += j * d + block + 2 * d;
        }
        if self.variant.has_variate_branch() {
            n += 2 * block + 2 * d;
        }
        n += if self.variant == VariantTag::TimeThenVariate {
            (d * 2 * d + 2 * d) + (2 * d * d + d)
        } else {
            (2 * d * 2 * d + 2 * d) + (2 * d * d + d)
        };
        Ok(n)
    }
}

#[derive(Clone, Debug)]
enum Block {
    Mamba(MambaBlock),
    Attention(AttentionEncoder),
}

impl Block {
    fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        match self {
            Block::Mamba(b) => b.forward(g, p, x),
            Block::Attention(a) => a.forward(g, p, x),
        }
    }
}

#[derive(Clone, Debug)]
struct Stack(Vec<Block>);

impl Stack {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &SdeConfig) -> Result<Self> {
        (0..cfg.depth)
            .map(|i| {
                let n = format!("{name}.{i}");
                Ok(match cfg.backbone {
                    Backbone::Attention => Block::Attention(AttentionEncoder::new(store, rng, &n, cfg.attention_config())?),
                    _ => Block::Mamba(MambaBlock::new(store, rng, &n, cfg.mamba_config())?),
                })
            })
            .collect::<Result<_>>()
            .map(Stack)
    }

    fn forward(&self, g: &mut Graph, p: &Bound, mut x: NodeId) -> Result<NodeId> {
        for b in &self.0 {
            x = b.forward(g, p, x)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
struct TimeBranch {
    pos: ParamId,
    stack: Stack,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
struct VariateBranch {
    fwd: Stack,
    rev: Stack,
    norm: LayerNorm,
}

/// Disentangled forecaster: patch embedding, a per-variate cross-time branch,
/// a bidirectional cross-variate branch, FFN fusion and a shared linear head.
#[derive(Clone, Debug)]
pub struct SdeModel {
    cfg: SdeConfig,
    num_patches: usize,
    store: ParamStore,
    embed: Linear,
    time: Option<TimeBranch>,
    variate: Option<VariateBranch>,
    fuse: Ffn,
    head: Linear,
}

impl SdeModel {
    pub fn new(cfg: SdeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let j = cfg.num_patches()?;
        let d = cfg.d_model;
        let embed = Linear::new(&mut store, &mut rng, "embed", cfg.patch_len, d, true);
        let time = if cfg.variant.has_time_branch() {
            let pos = store.add("time.pos", uniform(&mut rng, &[j, d], 0.02));
            let stack = Stack::new(&mut store, &mut rng, "time.block", &cfg)?;
            let norm = LayerNorm::new(&mut store, "time.norm", d);
            Some(TimeBranch { pos, stack, norm })
        } else {
            None
        };
        let variate = if cfg.variant.has_variate_branch() {
            let fwd = Stack::new(&mut store, &mut rng, "variate.fwd", &cfg)?;
            let rev = Stack::new(&mut store, &mut rng, "variate.rev", &cfg)?;
            let norm = LayerNorm::new(&mut store, "variate.norm", d);
            Some(VariateBranch { fwd, rev, norm })
        } else {
            None
        };
        let fuse_dims = if cfg.variant == VariantTag::TimeThenVariate { (d, 2 * d, d) } else { (2 * d, 2 * d, d) };
        let fuse = Ffn::new(&mut store, &mut rng, "fuse", fuse_dims, Activation::Silu);
        let head = Linear::new(&mut store, &mut rng, "head", j * d, cfg.horizon, true);
        Ok(Self { cfg, num_patches: j, store, embed, time, variate, fuse, head })
    }

    pub fn config(&self) -> &SdeConfig {
        &self.cfg
    }

    pub fn num_patches(&self) -> usize {
        self.num_patches
    }

    /// `x: [B, N, T]` -> `E: [B, N, J, D]`.
    pub fn embed(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        let patches = self.cfg.patch().patchify_node(g, x)?;
        self.embed.forward(g, p, patches)
    }

    /// Per-variate encoding over the patch axis: `LN(F(E + W_pos) + (E + W_pos))`.
    /// Identity when the variant has no time branch.
    pub fn time_branch(&self, g: &mut Graph, p: &Bound, e: NodeId) -> Result<NodeId> {
        let Some(t) = &self.time else { return Ok(e) };
        let s = g.shape(e).to_vec();
        let (b, n, j, d) = dims4(&s)?;
        let ep = g.add(e, p[t.pos])?;
        let flat = g.reshape(ep, &[b * n, j, d])?;
        let f = t.stack.forward(g, p, flat)?;
        let r = g.add(f, flat)?;
        let y = t.norm.forward(g, p, r)?;
        g.reshape(y, &s)
    }

    /// Per-patch encoding over the variate axis in both directions under
    /// the variate order `perm`. Identity when the variant has no variate branch.
    pub fn variate_branch(&self, g: &mut Graph, p: &Bound, e: NodeId, perm: &[usize]) -> Result<NodeId> {
        let Some(v) = &self.variate else { return Ok(e) };
        let s = g.shape(e).to_vec();
        let (b, n, j, d) = dims4(&s)?;
        if perm.len() != n {
            return Err(Error::dim("variate_branch", format!("permutation of {} for {n} variates", perm.len())));
        }
        let et = g.transpose(e, 1, 2)?;
        let permuted = g.gather(et, 2, perm)?;
        let seq = g.reshape(permuted, &[b * j, n, d])?;
        let fwd = v.fwd.forward(g, p, seq)?;
        let rev_idx: Vec<usize> = (0..n).rev().collect();
        let flipped = g.gather(seq, 1, &rev_idx)?;
        let rev = v.rev.forward(g, p, flipped)?;
        let rev = g.gather(rev, 1, &rev_idx)?;
        let both = g.add(fwd, rev)?;
        let both = g.reshape(both, &[b, j, n, d])?;
        let restored = g.gather(both, 2, &invert_perm(perm))?;
        let back = g.transpose(restored, 1, 2)?;
        let r = g.add(back, e)?;
        v.norm.forward(g, p, r)
    }

    /// Concatenates (time first) and fuses, then applies the shared head:
    /// `[B, N, J, D] x 2` -> `[B, N, S]`.
    pub fn fuse_and_head(&self, g: &mut Graph, p: &Bound, e_time: NodeId, e_var: NodeId) -> Result<NodeId> {
        let cat = g.concat(&[e_time, e_var], 3)?;
        let fused = self.fuse.forward(g, p, cat)?;
        self.head_only(g, p, fused)
    }

    fn head_only(&self, g: &mut Graph, p: &Bound, e: NodeId) -> Result<NodeId> {
        let flat = g.flatten(e, 2)?;
        self.head.forward(g, p, flat)
    }

    fn forward_impl(&self, g: &mut Graph, p: &Bound, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let e = self.embed(g, p, x)?;
        if self.cfg.variant == VariantTag::TimeThenVariate {
            let t = self.time_branch(g, p, e)?;
            let v = self.variate_branch(g, p, t, perm)?;
            let f = self.fuse.forward(g, p, v)?;
            return self.head_only(g, p, f);
        }
        let t = self.time_branch(g, p, e)?;
        let v = self.variate_branch(g, p, e, perm)?;
        self.fuse_and_head(g, p, t, v)
    }
}

fn dims4(s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [b, n, j, d] => Ok((b, n, j, d)),
        _ => Err(Error::dim("sde_model", format!("expected [B, N, J, D], got {s:?}"))),
    }
}

/// One weight matrix `[T, S]` plus bias, shared across variates.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    lookback: usize,
    store: ParamStore,
    layer: Linear,
}

impl LinearProbe {
    pub fn new(lookback: usize, horizon: usize, seed: u64) -> Result<Self> {
        if lookback == 0 || horizon == 0 {
            return Err(Error::Config("linear probe needs positive lookback and horizon".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = Linear::new(&mut store, &mut rng, "linear", lookback, horizon, true);
        Ok(Self { lookback, store, layer })
    }
}

/// Order-blind control: a learned bias per horizon step and nothing else.
#[derive(Clone, Debug)]
pub struct ConstantModel {
    horizon: usize,
    store: ParamStore,
    bias: ParamId,
}

impl ConstantModel {
    pub fn new(horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("constant model needs a positive horizon".into()));
        }
        let mut store = ParamStore::new();
        let bias = store.add("bias", Tensor::zeros(vec![horizon]));
        Ok(Self { horizon, store, bias })
    }
}

/// Repeats the last observed value over the horizon; no parameters.
#[derive(Clone, Debug)]
pub struct RepeatLast {
    lookback: usize,
    horizon: usize,
    store: ParamStore,
}

/// Serializable description from which a model is rebuilt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Sde(SdeConfig),
    LinearProbe { lookback: usize, horizon: usize },
    Constant { horizon: usize },
    RepeatLast { lookback: usize, horizon: usize },
}

impl ModelSpec {
    pub fn build(&self, seed: u64) -> Result<Model> {
        Ok(match self {
            ModelSpec::Sde(c) => Model::Sde(SdeModel::new(c.clone(), seed)?),
            ModelSpec::LinearProbe { lookback, horizon } => Model::Linear(LinearProbe::new(*lookback, *horizon, seed)?),
            ModelSpec::Constant { horizon } => Model::Constant(ConstantModel::new(*horizon)?),
            ModelSpec::RepeatLast { lookback, horizon } => {
                if *lookback == 0 || *horizon == 0 {
                    return Err(Error::Config("repeat-last needs positive lookback and horizon".into()));
                }
                Model::RepeatLast(RepeatLast { lookback: *lookback, horizon: *horizon, store: ParamStore::new() })
            }
        })
    }

    pub fn horizon(&self) -> usize {
        match self {
            ModelSpec::Sde(c) => c.horizon,
            ModelSpec::LinearProbe { horizon, .. }
            | ModelSpec::Constant { horizon }
            | ModelSpec::RepeatLast { horizon, .. } => *horizon,
        }
    }

    /// Required lookback; `None` when the model ignores its input.
    pub fn lookback(&self) -> Option<usize> {
        match self {
            ModelSpec::Sde(c) => Some(c.lookback),
            ModelSpec::LinearProbe { lookback, .. } | ModelSpec::RepeatLast { lookback, .. } => Some(*lookback),
            ModelSpec::Constant { .. } => None,
        }
    }
}

/// Anything that maps a lookback batch `[B, N, T]` to a forecast `[B, N, S]`.
pub trait Forecaster {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn horizon(&self) -> usize;

    /// Builds the forecast in `g`. `perm` is the variate order used by models
    /// that mix variates; others ignore it.
    fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId, perm: &[usize]) -> Result<NodeId>;

    /// Evaluation-mode forecast outside any training graph.
    fn predict(&self, x: &Tensor) -> Result<Tensor>;
}

#[derive(Clone, Debug)]
pub enum Model {
    Sde(SdeModel),
    Linear(LinearProbe),
    Constant(ConstantModel),
    RepeatLast(RepeatLast),
}

impl Model {
    pub fn spec(&self) -> ModelSpec {
        match self {
            Model::Sde(m) => ModelSpec::Sde(m.cfg.clone()),
            Model::Linear(m) => ModelSpec::LinearProbe { lookback: m.lookback, horizon: m.layer.fan_out },
            Model::Constant(m) => ModelSpec::Constant { horizon: m.horizon },
            Model::RepeatLast(m) => ModelSpec::RepeatLast { lookback: m.lookback, horizon: m.horizon },
        }
    }

    pub fn permutation_policy(&self) -> PermutationPolicy {
        match self {
            Model::Sde(m) => m.cfg.permutation,
            _ => PermutationPolicy::Identity,
        }
    }

    fn check_input(&self, g: &Graph, x: NodeId) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 3 {
            return Err(Error::dim("forecast", format!("expected [B, N, T], got {s:?}")));
        }
        if let Some(t) = self.spec().lookback() {
            if s[2] != t {
                return Err(Error::dim("forecast", format!("lookback {} but model expects {t}", s[2])));
            }
        }
        Ok(())
    }
}

impl Forecaster for Model {
    fn params(&self) -> &ParamStore {
        match self {
            Model::Sde(m) => &m.store,
            Model::Linear(m) => &m.store,
            Model::Constant(m) => &m.store,
            Model::RepeatLast(m) => &m.store,
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Sde(m) => &mut m.store,
            Model::Linear(m) => &mut m.store,
            Model::Constant(m) => &mut m.store,
            Model::RepeatLast(m) => &mut m.store,
        }
    }

    fn horizon(&self) -> usize {
        self.spec().horizon()
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        self.check_input(g, x)?;
        match self {
            Model::Sde(m) => m.forward_impl(g, p, x, perm),
            Model::Linear(m) => m.layer.forward(g, p, x),
            Model::Constant(m) => {
                let s = g.shape(x).to_vec();
                let z = g.constant(Tensor::zeros(vec![s[0], s[1], m.horizon]));
                g.add(z, p[m.bias])
            }
            Model::RepeatLast(m) => g.gather(x, 2, &vec![m.lookback - 1; m.horizon]),
        }
    }

    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.shape().get(1).copied().unwrap_or(1);
        let perms = self.permutation_policy().eval_perms(n);
        let mut acc: Option<Tensor> = None;
        for perm in &perms {
            let mut g = Graph::new();
            let p = self.params().bind(&mut g, false);
            let xi = g.constant(x.clone());
            let y = self.forward(&mut g, &p, xi, perm)?;
            let y = g.value(y).clone();
            acc = Some(match acc {
                None => y,
                Some(mut a) => {
                    a.data_mut().iter_mut().zip(y.data()).for_each(|(a, b)| *a += b);
                    a
                }
            });
        }
        let mut out = acc.expect("at least one permutation");
        if perms.len() > 1 {
            let k = perms.len() as f64;
            out.data_mut().iter_mut().for_each(|v| *v /= k);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::tensor::finite_diff_check;

    fn tiny(variant: VariantTag, backbone: Backbone) -> SdeConfig {
        SdeConfig {
            lookback: 10,
            horizon: 5,
            patch_len: 4,
            stride: 3,
            d_model: 6,
            d_state: 3,
            d_conv: 2,
            n_heads: 2,
            depth: 1,
            variant,
            backbone,
            permutation: PermutationPolicy::PerBatch,
        }
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn patch_count() {
        assert_eq!(PatchConfig::new(16, 8).num_patches(96).unwrap(), 11);
        assert_eq!(PatchConfig::new(96, 96).num_patches(96).unwrap(), 1);
        assert!(matches!(PatchConfig::new(97, 1).num_patches(96), Err(Error::Config(_))));
    }

    #[test]
    fn patchify_small() {
        let s = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = PatchConfig::new(2, 2).patchify(&s).unwrap();
        assert_eq!(p.shape(), &[1, 2, 2]);
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 4.0]);
        let whole = PatchConfig::new(4, 4).patchify(&s).unwrap();
        assert_eq!(whole.data(), s.data());
    }

    #[test]
    fn patchify_drops_tail() {
        let s = Tensor::new(vec![1, 7], (0..7).map(f64::from).collect()).unwrap();
        let p = PatchConfig::new(3, 2).patchify(&s).unwrap();
        assert_eq!(p.shape(), &[1, 3, 3]);
        assert_eq!(p.data(), &[0.0, 1.0, 2.0, 2.0, 3.0, 4.0, 4.0, 5.0, 6.0]);
    }

    fn closed_form(c: &SdeConfig) -> usize {
        // Counted from the layer list, independent of the config helper.
        let d = c.d_model;
        let j = (c.lookback - c.patch_len) / c.stride + 1;
        let block = if c.backbone == Backbone::Attention {
            let ff = d;
            3 * d * (d + 1) + d * ff + ff + ff * d + d + 4 * d
        } else {
            let (h, k) = (c.d_state, c.d_conv);
            let lin = |i: usize, o: usize| i * o + o;
            lin(d, d) + k * d + d + 2 * lin(d, h) + lin(d, d) + d * h + lin(d, d) + 2 * d
        };
        let mut n = (c.patch_len + 1) * d + j * d * c.horizon + c.horizon;
        if c.variant != VariantTag::NoTimeBranch {
            n += j * d + c.depth * block + 2 * d;
        }
        if c.variant != VariantTag::NoVariateBranch {
            n += 2 * c.depth * block + 2 * d;
        }
        let width = if c.variant == VariantTag::TimeThenVariate { d } else { 2 * d };
        n + width * 2 * d + 2 * d + 2 * d * d + d
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let mut deep = tiny(VariantTag::TimeThenVariate, Backbone::Mamba);
        deep.depth = 2;
        for cfg in [
            SdeConfig::default(),
            tiny(VariantTag::NoTimeBranch, Backbone::Attention),
            deep,
            tiny(VariantTag::NoVariateBranch, Backbone::SMamba),
        ] {
            let m = SdeModel::new(cfg.clone(), 0).unwrap();
            assert_eq!(m.store.num_scalars(), closed_form(&cfg), "{cfg:?}");
            assert_eq!(cfg.num_scalars().unwrap(), closed_form(&cfg));
        }
    }

    #[test]
    fn vanilla_activation_needs_mamba() {
        let err = SdeModel::new(tiny(VariantTag::VanillaActivation, Backbone::Attention), 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let m = SdeModel::new(tiny(VariantTag::VanillaActivation, Backbone::SMamba), 0).unwrap();
        assert!(!m.cfg.mamba_config().simplified);
    }

    #[test]
    fn output_shapes() {
        let cfg = SdeConfig::default();
        let m = Model::Sde(SdeModel::new(cfg, 1).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[2, 7, 96]);
        assert_eq!(m.predict(&x).unwrap().shape(), &[2, 7, 96]);
        if let Model::Sde(s) = &m {
            let mut g = Graph::new();
            let p = s.store.bind(&mut g, false);
            let xi = g.constant(x);
            let e = s.embed(&mut g, &p, xi).unwrap();
            assert_eq!(g.shape(e), &[2, 7, 11, 32]);
            let t = s.time_branch(&mut g, &p, e).unwrap();
            assert_eq!(g.shape(t), &[2, 7, 11, 32]);
        }
    }

    #[test]
    fn embedding_is_linear() {
        let m = SdeModel::new(tiny(VariantTag::Full, Backbone::SMamba), 2).unwrap();
        let mut store = m.store.clone();
        *store.get_mut(m.embed.b.unwrap()) = Tensor::zeros(vec![6]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x1, x2) = (random(&mut rng, &[1, 2, 10]), random(&mut rng, &[1, 2, 10]));
        let (a, b) = (1.7, -0.4);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let n1 = g.constant(x1);
        let n2 = g.constant(x2);
        let s1 = g.scale(n1, a);
        let s2 = g.scale(n2, b);
        let mix = g.add(s1, s2).unwrap();
        let e_mix = m.embed(&mut g, &p, mix).unwrap();
        let e1 = m.embed(&mut g, &p, n1).unwrap();
        let e2 = m.embed(&mut g, &p, n2).unwrap();
        let e1 = g.scale(e1, a);
        let e2 = g.scale(e2, b);
        let want = g.add(e1, e2).unwrap();
        assert!(g.value(e_mix).max_abs_diff(g.value(want)) <= 1e-12);
    }

    #[test]
    fn time_branch_is_per_variate() {
        let m = SdeModel::new(tiny(VariantTag::Full, Backbone::SMamba), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = random(&mut rng, &[1, 2, 3, 6]);
        let mut e2 = e.clone();
        for k in 0..18 {
            e2.data_mut()[k] += 0.5;
        }
        let run = |e: Tensor| {
            let mut g = Graph::new();
            let p = m.store.bind(&mut g, false);
            let ei = g.constant(e);
            let t = m.time_branch(&mut g, &p, ei).unwrap();
            g.value(t).data()[18..].to_vec()
        };
        assert_eq!(run(e), run(e2));
    }

    #[test]
    fn position_encoding_breaks_equivariance() {
        let mut m = SdeModel::new(tiny(VariantTag::Full, Backbone::Attention), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = random(&mut rng, &[1, 1, 3, 6]);
        let perm = [2, 0, 1];
        let run = |m: &SdeModel, permute_input: bool| {
            let mut g = Graph::new();
            let p = m.store.bind(&mut g, false);
            let mut ei = g.constant(e.clone());
            if permute_input {
                ei = g.gather(ei, 2, &perm).unwrap();
            }
            let t = m.time_branch(&mut g, &p, ei).unwrap();
            let t = if permute_input { t } else { g.gather(t, 2, &perm).unwrap() };
            g.value(t).clone()
        };
        assert!(run(&m, true).max_abs_diff(&run(&m, false)) > 1e-6);
        let pos = m.time.as_ref().unwrap().pos;
        *m.store.get_mut(pos) = Tensor::zeros(vec![3, 6]);
        assert!(run(&m, true).max_abs_diff(&run(&m, false)) <= 1e-12);
    }

    #[test]
    fn variate_branch_patch_independence() {
        let m = SdeModel::new(tiny(VariantTag::Full, Backbone::SMamba), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = random(&mut rng, &[1, 3, 3, 6]);
        let mut e2 = e.clone();
        for i in 0..3 {
            for c in 0..6 {
                e2.set(&[0, i, 0, c], 9.0);
            }
        }
        let run = |e: Tensor| {
            let mut g = Graph::new();
            let p = m.store.bind(&mut g, false);
            let ei = g.constant(e);
            let v = m.variate_branch(&mut g, &p, ei, &[2, 0, 1]).unwrap();
            let v = g.slice(v, 2, 1, 2).unwrap();
            g.value(v).clone()
        };
        assert_eq!(run(e), run(e2));
    }

    #[test]
    fn single_variate_ignores_permutation_and_is_deterministic() {
        let m = SdeModel::new(tiny(VariantTag::Full, Backbone::SMamba), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = random(&mut rng, &[1, 1, 3, 6]);
        let run = || {
            let mut g = Graph::new();
            let p = m.store.bind(&mut g, false);
            let ei = g.constant(e.clone());
            let v = m.variate_branch(&mut g, &p, ei, &[0]).unwrap();
            g.value(v).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn seeded_permutations_reproduce() {
        let m = SdeModel::new(tiny(VariantTag::Full, Backbone::SMamba), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let e = random(&mut rng, &[2, 5, 3, 6]);
        let run = || {
            let mut prng = ChaCha8Rng::seed_from_u64(99);
            let mut out = Vec::new();
            for _ in 0..3 {
                let perm = PermutationPolicy::PerBatch.train_perm(5, &mut prng);
                let mut g = Graph::new();
                let p = m.store.bind(&mut g, false);
                let ei = g.constant(e.clone());
                let v = m.variate_branch(&mut g, &p, ei, &perm).unwrap();
                out.push(g.value(v).clone());
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ablations_agree_on_zero_embedding() {
        let cfg_a = tiny(VariantTag::NoTimeBranch, Backbone::SMamba);
        let cfg_b = tiny(VariantTag::NoVariateBranch, Backbone::SMamba);
        let a = SdeModel::new(cfg_a, 8).unwrap();
        let mut b = SdeModel::new(cfg_b, 9).unwrap();
        // Zero output norms make both branches map 0 to 0, so both reduce to
        // fuse(0, 0) once fusion and head weights are shared.
        *b.store.by_name_mut("time.norm.gamma").unwrap() = Tensor::zeros(vec![6]);
        let mut a = a;
        *a.store.by_name_mut("variate.norm.gamma").unwrap() = Tensor::zeros(vec![6]);
        for name in ["fuse.l1.w", "fuse.l1.b", "fuse.l2.w", "fuse.l2.b", "head.w", "head.b"] {
            *b.store.by_name_mut(name).unwrap() = a.store.by_name(name).unwrap().clone();
        }
        let run = |m: &SdeModel| {
            let mut g = Graph::new();
            let p = m.store.bind(&mut g, false);
            let z = g.constant(Tensor::zeros(vec![1, 2, 3, 6]));
            let t = m.time_branch(&mut g, &p, z).unwrap();
            let v = m.variate_branch(&mut g, &p, z, &[0, 1]).unwrap();
            let y = m.fuse_and_head(&mut g, &p, t, v).unwrap();
            g.value(y).clone()
        };
        let ya = run(&a);
        assert_eq!(ya, run(&b));
        assert_eq!(&ya.data()[..5], &ya.data()[5..]);
    }

    #[test]
    fn no_variate_branch_isolates_variates() {
        let m = Model::Sde(SdeModel::new(tiny(VariantTag::NoVariateBranch, Backbone::SMamba), 10).unwrap());
        let full = Model::Sde(SdeModel::new(tiny(VariantTag::Full, Backbone::SMamba), 10).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&mut rng, &[1, 2, 10]);
        let mut x2 = x.clone();
        for t in 0..10 {
            x2.set(&[0, 1, t], rng.gen_range(-3.0..3.0));
        }
        let (y, y2) = (m.predict(&x).unwrap(), m.predict(&x2).unwrap());
        assert_eq!(&y.data()[..5], &y2.data()[..5]);
        let (f, f2) = (full.predict(&x).unwrap(), full.predict(&x2).unwrap());
        assert_ne!(&f.data()[..5], &f2.data()[..5]);
    }

    #[test]
    fn swapping_branches_with_swapped_weights_is_consistent() {
        let m = SdeModel::new(tiny(VariantTag::Full, Backbone::SMamba), 11).unwrap();
        let mut swapped = m.clone();
        let w = m.store.by_name("fuse.l1.w").unwrap();
        let d = 6;
        let mut ws = w.clone();
        for r in 0..2 * d {
            let src = if r < d { r + d } else { r - d };
            for c in 0..2 * d {
                ws.set(&[r, c], w.get(&[src, c]));
            }
        }
        *swapped.store.by_name_mut("fuse.l1.w").unwrap() = ws;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (t, v) = (random(&mut rng, &[1, 2, 3, 6]), random(&mut rng, &[1, 2, 3, 6]));
        let run = |m: &SdeModel, a: &Tensor, b: &Tensor| {
            let mut g = Graph::new();
            let p = m.store.bind(&mut g, false);
            let (ai, bi) = (g.constant(a.clone()), g.constant(b.clone()));
            let y = m.fuse_and_head(&mut g, &p, ai, bi).unwrap();
            g.value(y).clone()
        };
        assert!(run(&m, &t, &v).max_abs_diff(&run(&swapped, &v, &t)) <= 1e-12);
    }

    #[test]
    fn head_is_shared_across_variates() {
        let mut cfg = tiny(VariantTag::Full, Backbone::Attention);
        cfg.permutation = PermutationPolicy::Identity;
        let m = Model::Sde(SdeModel::new(cfg, 12).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(&mut rng, &[1, 4, 10]);
        let perm = [2, 3, 0, 1];
        let mut g = Graph::new();
        let xi = g.constant(x);
        let xp = g.gather(xi, 1, &perm).unwrap();
        let xp = g.value(xp).clone();
        let y = m.predict(g.value(xi)).unwrap();
        let yp = m.predict(&xp).unwrap();
        let mut g2 = Graph::new();
        let yi = g2.constant(y);
        let y_perm = g2.gather(yi, 1, &perm).unwrap();
        assert!(g2.value(y_perm).max_abs_diff(&yp) <= 1e-12);
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let m = Model::Sde(SdeModel::new(tiny(VariantTag::Full, Backbone::Mamba), 13).unwrap());
        let m2 = Model::Sde(SdeModel::new(tiny(VariantTag::Full, Backbone::Mamba), 13).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(&mut rng, &[3, 2, 10]);
        assert_eq!(m.predict(&x).unwrap(), m2.predict(&x).unwrap());
    }

    #[test]
    fn every_variant_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random(&mut rng, &[2, 3, 10]);
        for v in [
            VariantTag::Full,
            VariantTag::NoTimeBranch,
            VariantTag::NoVariateBranch,
            VariantTag::VanillaActivation,
            VariantTag::TimeThenVariate,
        ] {
            for b in [Backbone::SMamba, Backbone::Mamba, Backbone::Attention] {
                if v == VariantTag::VanillaActivation && b == Backbone::Attention {
                    continue;
                }
                let m = ModelSpec::Sde(tiny(v, b)).build(0).unwrap();
                let y = m.predict(&x).unwrap();
                assert_eq!(y.shape(), &[2, 3, 5]);
                assert!(y.is_finite());
            }
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let mut cfg = tiny(VariantTag::Full, Backbone::SMamba);
        cfg.lookback = 10;
        let m = Model::Sde(SdeModel::new(cfg, 15).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = random(&mut rng, &[1, 2, 10]);
        let report = finite_diff_check(
            |g, params| {
                let p = Bound::from_nodes(params.to_vec());
                let xi = g.constant(x.clone());
                let y = m.forward(g, &p, xi, &[1, 0])?;
                Ok(g.mean(y))
            },
            m.params().tensors(),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn baselines() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = random(&mut rng, &[2, 3, 4]);
        let mut lin = ModelSpec::LinearProbe { lookback: 4, horizon: 4 }.build(0).unwrap();
        let (w, b) = (lin.params().tensors()[0].clone(), lin.params().tensors()[1].clone());
        lin.params_mut().tensors_mut()[0] = Tensor::eye(4);
        lin.params_mut().tensors_mut()[1] = Tensor::zeros(b.shape().to_vec());
        assert_eq!(lin.predict(&x).unwrap(), x);
        lin.params_mut().tensors_mut()[0] = Tensor::zeros(w.shape().to_vec());
        lin.params_mut().tensors_mut()[1] = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]);
        let y = lin.predict(&x).unwrap();
        for row in y.data().chunks(4) {
            assert_eq!(row, &[1.0, 2.0, 3.0, 4.0]);
        }

        let rl = ModelSpec::RepeatLast { lookback: 4, horizon: 3 }.build(0).unwrap();
        let y = rl.predict(&x).unwrap();
        for (row, xr) in y.data().chunks(3).zip(x.data().chunks(4)) {
            assert!(row.iter().all(|&v| v == xr[3]));
        }

        let c = ModelSpec::Constant { horizon: 2 }.build(0).unwrap();
        assert_eq!(c.predict(&x).unwrap(), Tensor::zeros(vec![2, 3, 2]));
        assert_eq!(c.spec(), ModelSpec::Constant { horizon: 2 });
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = ModelSpec::Sde(SdeConfig::default());
        let text = toml::to_string(&spec).unwrap();
        assert_eq!(toml::from_str::<ModelSpec>(&text).unwrap(), spec);
    }
}
