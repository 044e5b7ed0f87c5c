use super::kernels::{self, ScanDims};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Exp,
    Softplus,
    Sigmoid,
    Silu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Unary(Unary, NodeId),
    Softmax(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    CausalConv { x: NodeId, kernel: NodeId },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize },
    Gather { x: NodeId, axis: usize, indices: Vec<usize> },
    Transpose { x: NodeId, ax0: usize, ax1: usize },
    Reshape(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    Scan { u: NodeId, delta: NodeId, a: NodeId, b: NodeId, c: NodeId, states: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Primitive selector for [`Graph::apply`], carrying each primitive's attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale(f64),
    MatMul,
    Exp,
    Softplus,
    Sigmoid,
    Silu,
    Softmax,
    /// Operands: input, scale, shift.
    LayerNorm { eps: f64 },
    /// Operands: input `[.., L, C]`, kernel `[k, C]`.
    CausalConv,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Gather { axis: usize, indices: Vec<usize> },
    Transpose { ax0: usize, ax1: usize },
    Reshape { shape: Vec<usize> },
    Flatten { from_axis: usize },
    Mean,
    Sum,
    /// Operands: u, delta, A, B, C.
    SelectiveScan,
}

/// Append-only record of tensor operations supporting one reverse sweep.
///
/// Nodes are stored in creation order, which is a topological order: every
/// operand id is smaller than the id of the node consuming it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Input that receives a gradient on [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Accumulated gradient of a leaf, present after a backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    /// Generic entry point: dispatches `kind` over `operands`.
    pub fn apply(&mut self, kind: OpKind, operands: &[NodeId]) -> Result<NodeId> {
        let name = format!("{kind:?}");
        let want = |n: usize| -> Result<()> {
            if operands.len() == n {
                Ok(())
            } else {
                Err(Error::Contract(format!("{name} takes {n} operands, got {}", operands.len())))
            }
        };
        match kind {
            OpKind::Add => want(2).and_then(|_| self.add(operands[0], operands[1])),
            OpKind::Sub => want(2).and_then(|_| self.sub(operands[0], operands[1])),
            OpKind::Mul => want(2).and_then(|_| self.mul(operands[0], operands[1])),
            OpKind::Scale(c) => want(1).map(|_| self.scale(operands[0], c)),
            OpKind::MatMul => want(2).and_then(|_| self.matmul(operands[0], operands[1])),
            OpKind::Exp => want(1).map(|_| self.exp(operands[0])),
            OpKind::Softplus => want(1).map(|_| self.softplus(operands[0])),
            OpKind::Sigmoid => want(1).map(|_| self.sigmoid(operands[0])),
            OpKind::Silu => want(1).map(|_| self.silu(operands[0])),
            OpKind::Softmax => want(1).map(|_| self.softmax(operands[0])),
            OpKind::LayerNorm { eps } => {
                want(3).and_then(|_| self.layer_norm_eps(operands[0], operands[1], operands[2], eps))
            }
            OpKind::CausalConv => want(2).and_then(|_| self.causal_conv(operands[0], operands[1])),
            OpKind::Concat { axis } => self.concat(operands, axis),
            OpKind::Slice { axis, start, len } => {
                want(1).and_then(|_| self.slice(operands[0], axis, start, len))
            }
            OpKind::Gather { axis, indices } => {
                want(1).and_then(|_| self.gather(operands[0], axis, &indices))
            }
            OpKind::Transpose { ax0, ax1 } => want(1).and_then(|_| self.transpose(operands[0], ax0, ax1)),
            OpKind::Reshape { shape } => want(1).and_then(|_| self.reshape(operands[0], &shape)),
            OpKind::Flatten { from_axis } => want(1).and_then(|_| self.flatten(operands[0], from_axis)),
            OpKind::Mean => want(1).map(|_| self.mean(operands[0])),
            OpKind::Sum => want(1).map(|_| self.sum(operands[0])),
            OpKind::SelectiveScan => want(5).and_then(|_| {
                self.selective_scan(operands[0], operands[1], operands[2], operands[3], operands[4])
            }),
        }
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, kind: Binary, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = if sa.ends_with(sb) {
            sa.to_vec()
        } else if sb.ends_with(sa) {
            sb.to_vec()
        } else {
            let name = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            return Err(Error::dim(name, format!("{sa:?} vs {sb:?}")));
        };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n: usize = out_shape.iter().product();
        let (na, nb) = (va.len(), vb.len());
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (va[i % na], vb[i % nb]);
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Binary(kind, a, b), Tensor::from_parts(out_shape, data), rg))
    }

    /// Elementwise sum; the smaller operand broadcasts over leading axes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a).map(|x| x * factor);
        let rg = self.any_grad(&[a]);
        self.push(Op::Scale(a, factor), v, rg)
    }

    fn unary(&mut self, kind: Unary, a: NodeId) -> NodeId {
        let f: fn(f64) -> f64 = match kind {
            Unary::Exp => f64::exp,
            Unary::Softplus => kernels::softplus,
            Unary::Sigmoid => kernels::sigmoid,
            Unary::Silu => |x| x * kernels::sigmoid(x),
        };
        let v = self.value(a).map(f);
        let rg = self.any_grad(&[a]);
        self.push(Op::Unary(kind, a), v, rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Exp, a)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Softplus, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Silu, a)
    }

    // ---- linear algebra -------------------------------------------------

    /// `[.., M, K] x [K, N]` (shared right operand) or `[.., M, K] x [.., K, N]`
    /// with identical leading axes.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::dim("matmul", format!("{sa:?} x {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let batched = sb.len() > 2;
        if batched && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(err());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            if batched {
                for i in 0..batch {
                    kernels::matmul_acc(
                        &va[i * m * k..(i + 1) * m * k],
                        &vb[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            } else {
                kernels::matmul_acc(va, vb, &mut out, batch * m, k, n);
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Tensor::from_parts(shape, out), rg))
    }

    /// `x W + b` with `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- normalization --------------------------------------------------

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let w = *t.shape().last().unwrap_or(&1);
        let v = Tensor::from_parts(t.shape().to_vec(), kernels::softmax_rows(t.data(), w));
        let rg = self.any_grad(&[a]);
        self.push(Op::Softmax(a), v, rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        self.layer_norm_eps(x, gamma, beta, LAYER_NORM_EPS)
    }

    pub fn layer_norm_eps(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let Some(&c) = sx.last() else {
            return Err(Error::InvalidInput { op: "layernorm", detail: "rank-0 input has no axis".into() });
        };
        if c == 0 {
            return Err(Error::InvalidInput { op: "layernorm", detail: "axis of extent 0".into() });
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(
                "layernorm",
                format!("input {sx:?}, scale {:?}, shift {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let (vx, g, b) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; vx.len()];
        for (row, o) in vx.chunks(c).zip(out.chunks_mut(c)) {
            let (mean, rstd) = kernels::row_stats(row, eps);
            for j in 0..c {
                o[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, Tensor::from_parts(sx, out), rg))
    }

    // ---- sequence ops ---------------------------------------------------

    /// Depthwise causal convolution over axis -2 of `x: [.., L, C]` with
    /// `kernel: [k, C]`; tap `j` reads the input `j` steps back.
    pub fn causal_conv(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() < 2 || sk.len() != 2 || sk[1] != sx[sx.len() - 1] {
            return Err(Error::dim("conv1d_causal_depthwise", format!("input {sx:?}, kernel {sk:?}")));
        }
        let (len, ch) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        let rows = sx[..sx.len() - 2].iter().product();
        let y = kernels::causal_conv(self.value(x).data(), self.value(kernel).data(), rows, len, ch, sk[0]);
        let rg = self.any_grad(&[x, kernel]);
        Ok(self.push(Op::CausalConv { x, kernel }, Tensor::from_parts(sx, y), rg))
    }

    /// Fused selective scan. Shapes: `u, delta: [G, L, D]`, `a: [D, H]`,
    /// `b, c: [G, L, H]`; output `[G, L, D]`.
    ///
    /// `h_t = exp(delta_t a) * h_{t-1} + (exp(delta_t a) - 1)/a * b_t * u_t`,
    /// `y_t = sum_h c_t[h] h_t[., h]`, starting from `h_0 = 0`.
    pub fn selective_scan(&mut self, u: NodeId, delta: NodeId, a: NodeId, b: NodeId, c: NodeId) -> Result<NodeId> {
        let su = self.shape(u).to_vec();
        let sa = self.shape(a).to_vec();
        let err = |g: &Graph| {
            Error::dim(
                "selective_scan",
                format!(
                    "u {su:?}, delta {:?}, A {sa:?}, B {:?}, C {:?}",
                    g.shape(delta),
                    g.shape(b),
                    g.shape(c)
                ),
            )
        };
        if su.len() != 3 || sa.len() != 2 || sa[0] != su[2] || self.shape(delta) != su.as_slice() {
            return Err(err(self));
        }
        let sbc = [su[0], su[1], sa[1]];
        if self.shape(b) != sbc || self.shape(c) != sbc {
            return Err(err(self));
        }
        let dims = ScanDims { groups: su[0], len: su[1], ch: su[2], state: sa[1] };
        let (y, states) = kernels::scan_forward(
            self.value(u).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            dims,
        );
        let rg = self.any_grad(&[u, delta, a, b, c]);
        Ok(self.push(Op::Scan { u, delta, a, b, c, states }, Tensor::from_parts(su, y), rg))
    }

    // ---- shape ops ------------------------------------------------------

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let Some(&first) = inputs.first() else {
            return Err(Error::InvalidInput { op: "concat", detail: "no operands".into() });
        };
        let s0 = self.shape(first).to_vec();
        if axis >= s0.len() {
            return Err(Error::dim("concat", format!("axis {axis} for shape {s0:?}")));
        }
        let mut total = 0;
        for &i in inputs {
            let s = self.shape(i);
            if s.len() != s0.len() || s[..axis] != s0[..axis] || s[axis + 1..] != s0[axis + 1..] {
                return Err(Error::dim("concat", format!("{s0:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in inputs {
                let v = self.value(i);
                let w = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        Ok(self.push(Op::Concat { inputs: inputs.to_vec(), axis }, Tensor::from_parts(shape, out), rg))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::dim("slice", format!("[{start}..{}] on axis {axis} of {s:?}", start + len)));
        }
        let (outer, ext, inner) = kernels::split_axis(&s, axis);
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::Slice { x, axis, start }, Tensor::from_parts(shape, out), rg))
    }

    /// Selects `indices` along `axis` (a permutation, a reversal, or any selection).
    pub fn gather(&mut self, x: NodeId, axis: usize, indices: &[usize]) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || indices.is_empty() || indices.iter().any(|&i| i >= s[axis]) {
            return Err(Error::dim("gather", format!("indices {indices:?} on axis {axis} of {s:?}")));
        }
        let (outer, ext, inner) = kernels::split_axis(&s, axis);
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * ext + i) * inner;
                out.extend_from_slice(&v[base..base + inner]);
            }
        }
        let mut shape = s;
        shape[axis] = indices.len();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::Gather { x, axis, indices: indices.to_vec() }, Tensor::from_parts(shape, out), rg))
    }

    pub fn transpose(&mut self, x: NodeId, ax0: usize, ax1: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if ax0 >= s.len() || ax1 >= s.len() {
            return Err(Error::dim("transpose", format!("axes ({ax0}, {ax1}) of {s:?}")));
        }
        if ax0 == ax1 {
            return self.reshape(x, &s);
        }
        let (lo, hi) = (ax0.min(ax1), ax0.max(ax1));
        let data = kernels::swap_axes(self.value(x).data(), &s, lo, hi);
        let mut shape = s;
        shape.swap(lo, hi);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::Transpose { x, ax0: lo, ax1: hi }, Tensor::from_parts(shape, data), rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() || shape.contains(&0) {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let v = Tensor::from_parts(shape.to_vec(), self.value(x).data().to_vec());
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::Reshape(x), v, rg))
    }

    /// Merges all axes from `from_axis` onward into one.
    pub fn flatten(&mut self, x: NodeId, from_axis: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if from_axis >= s.len() {
            return Err(Error::dim("flatten", format!("axis {from_axis} of {s:?}")));
        }
        let mut shape = s[..from_axis].to_vec();
        shape.push(s[from_axis..].iter().product());
        self.reshape(x, &shape)
    }

    // ---- reductions -----------------------------------------------------

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.any_grad(&[x]);
        self.push(Op::Mean(x), Tensor::scalar(m), rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum::<f64>();
        let rg = self.any_grad(&[x]);
        self.push(Op::Sum(x), Tensor::scalar(s), rg)
    }

    /// Mean squared difference between two equally shaped nodes.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::dim("mse", format!("{:?} vs {:?}", self.shape(pred), self.shape(target))));
        }
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    // ---- reverse sweep --------------------------------------------------

    /// Accumulates `d loss / d leaf` into every gradient-requiring leaf reachable
    /// from `loss`. Repeated calls add to existing leaf gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).shape().is_empty() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    None => node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let val = |id: NodeId| self.nodes[id.0].value.data();
        // Accumulates into the gradient buffer of `id` when it needs one.
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[id.0];
            if !n.requires_grad {
                return;
            }
            let buf = grads[id.0].get_or_insert_with(|| vec![0.0; n.value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::Binary(kind, a, b) => {
                let (va, vb) = (val(a), val(b));
                let (na, nb) = (va.len(), vb.len());
                acc(a, &mut |ga| {
                    for (i, gi) in g.iter().enumerate() {
                        ga[i % na] += match kind {
                            Binary::Add | Binary::Sub => *gi,
                            Binary::Mul => gi * vb[i % nb],
                        };
                    }
                });
                acc(b, &mut |gb| {
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % nb] += match kind {
                            Binary::Add => *gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * va[i % na],
                        };
                    }
                });
            }
            &Op::Scale(a, c) => acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, gi)| *x += c * gi)),
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
                let batch = out.len() / (m * n);
                let (va, vb) = (val(a), val(b));
                let batched = sb.len() > 2;
                acc(a, &mut |ga| {
                    if batched {
                        for i in 0..batch {
                            kernels::matmul_grad_lhs(
                                &g[i * m * n..(i + 1) * m * n],
                                &vb[i * k * n..(i + 1) * k * n],
                                &mut ga[i * m * k..(i + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    } else {
                        kernels::matmul_grad_lhs(g, vb, ga, batch * m, k, n);
                    }
                });
                acc(b, &mut |gb| {
                    if batched {
                        for i in 0..batch {
                            kernels::matmul_grad_rhs(
                                &va[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                &mut gb[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    } else {
                        kernels::matmul_grad_rhs(va, g, gb, batch * m, k, n);
                    }
                });
            }
            &Op::Unary(kind, a) => {
                let va = val(a);
                acc(a, &mut |ga| {
                    for i in 0..ga.len() {
                        let d = match kind {
                            Unary::Exp => out[i],
                            Unary::Softplus => kernels::sigmoid(va[i]),
                            Unary::Sigmoid => out[i] * (1.0 - out[i]),
                            Unary::Silu => {
                                let s = kernels::sigmoid(va[i]);
                                s + va[i] * s * (1.0 - s)
                            }
                        };
                        ga[i] += g[i] * d;
                    }
                });
            }
            &Op::Softmax(a) => {
                let w = *node.value.shape().last().unwrap_or(&1);
                acc(a, &mut |ga| {
                    for r in 0..out.len() / w {
                        let (y, gr) = (&out[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..w {
                            ga[r * w + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            &Op::LayerNorm { x, gamma, beta, eps } => {
                let vx = val(x);
                let vg = val(gamma);
                let c = vg.len();
                let rows = vx.len() / c;
                let mut dx = vec![0.0; vx.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for r in 0..rows {
                    let row = &vx[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let (mean, rstd) = kernels::row_stats(row, eps);
                    let (mut m1, mut m2) = (0.0, 0.0);
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * rstd;
                        dxhat[j] = gr[j] * vg[j];
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for j in 0..c {
                        dx[r * c + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                acc(x, &mut |gx| gx.iter_mut().zip(&dx).for_each(|(a, b)| *a += b));
                acc(gamma, &mut |gg| gg.iter_mut().zip(&dgamma).for_each(|(a, b)| *a += b));
                acc(beta, &mut |gb| gb.iter_mut().zip(&dbeta).for_each(|(a, b)| *a += b));
            }
            &Op::CausalConv { x, kernel } => {
                let sx = node.value.shape();
                let (len, ch) = (sx[sx.len() - 2], sx[sx.len() - 1]);
                let rows = out.len() / (len * ch);
                let (vx, vk) = (val(x), val(kernel));
                let k = vk.len() / ch;
                acc(x, &mut |gx| {
                    for r in 0..rows {
                        let base = r * len * ch;
                        for t in 0..len {
                            for j in 0..k.min(t + 1) {
                                for c in 0..ch {
                                    gx[base + (t - j) * ch + c] += vk[j * ch + c] * g[base + t * ch + c];
                                }
                            }
                        }
                    }
                });
                acc(kernel, &mut |gk| {
                    for r in 0..rows {
                        let base = r * len * ch;
                        for t in 0..len {
                            for j in 0..k.min(t + 1) {
                                for c in 0..ch {
                                    gk[j * ch + c] += vx[base + (t - j) * ch + c] * g[base + t * ch + c];
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = kernels::split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &i in inputs {
                    let ext = self.nodes[i.0].value.shape()[*axis];
                    acc(i, &mut |gi| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * ext * inner;
                            for (a, b) in gi[dst..dst + ext * inner].iter_mut().zip(&g[src..src + ext * inner]) {
                                *a += b;
                            }
                        }
                    });
                    offset += ext;
                }
            }
            &Op::Slice { x, axis, start } => {
                let (outer, len, inner) = kernels::split_axis(node.value.shape(), axis);
                let ext = self.nodes[x.0].value.shape()[axis];
                acc(x, &mut |gx| {
                    for o in 0..outer {
                        let dst = (o * ext + start) * inner;
                        let src = o * len * inner;
                        for (a, b) in gx[dst..dst + len * inner].iter_mut().zip(&g[src..src + len * inner]) {
                            *a += b;
                        }
                    }
                });
            }
            Op::Gather { x, axis, indices } => {
                let (outer, _, inner) = kernels::split_axis(node.value.shape(), *axis);
                let ext = self.nodes[x.0].value.shape()[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for (p, &i) in indices.iter().enumerate() {
                            let dst = (o * ext + i) * inner;
                            let src = (o * indices.len() + p) * inner;
                            for (a, b) in gx[dst..dst + inner].iter_mut().zip(&g[src..src + inner]) {
                                *a += b;
                            }
                        }
                    }
                });
            }
            &Op::Transpose { x, ax0, ax1 } => {
                let back = kernels::swap_axes(g, node.value.shape(), ax0, ax1);
                acc(x, &mut |gx| gx.iter_mut().zip(&back).for_each(|(a, b)| *a += b));
            }
            &Op::Reshape(x) => acc(x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b)),
            &Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel() as f64;
                acc(x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0] / n));
            }
            &Op::Sum(x) => acc(x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0])),
            Op::Scan { u, delta, a, b, c, states } => {
                let su = node.value.shape();
                let state = self.nodes[a.0].value.shape()[1];
                let dims = ScanDims { groups: su[0], len: su[1], ch: su[2], state };
                let sg = kernels::scan_backward(
                    val(*u),
                    val(*delta),
                    val(*a),
                    val(*b),
                    val(*c),
                    states,
                    g,
                    dims,
                );
                let add = |dst: &mut [f64], src: &[f64]| dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                acc(*u, &mut |gu| add(gu, &sg.du));
                acc(*delta, &mut |gd| add(gd, &sg.ddelta));
                acc(*a, &mut |ga| add(ga, &sg.da));
                acc(*b, &mut |gb| add(gb, &sg.db));
                acc(*c, &mut |gc| add(gc, &sg.dc));
            }
        }
    }
}

/// Stabilizer added to the variance in layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;
