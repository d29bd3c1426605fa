//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every forward call appends a node holding its output value. Nodes whose
//! inputs require gradients also keep whatever the backward rule needs.
//! `backward` walks the node list in reverse, which is a valid reverse
//! topological order because inputs always precede the nodes that use them.

use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{dot, gemm};
use super::params::{Gradients, ParamId, ParamKey, ParamStore};
use super::tensor::dims2;
use super::{AutodiffError, Tensor};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Causal multi-head attention over `rows / seq_len` stacked sequences.
///
/// `q`, `k` and `v` are `[batch * seq_len, d]`; heads split `d` evenly.
#[derive(Clone, Debug)]
pub struct AttentionConfig {
    pub heads: usize,
    pub seq_len: usize,
    pub causal: bool,
    /// Adds a per-head linear distance penalty `-slope * (i - j)` to the scores.
    pub alibi: bool,
    /// `false` marks a padding key that no query may attend to.
    pub key_mask: Option<Arc<Vec<bool>>>,
}

impl AttentionConfig {
    pub fn causal(heads: usize, seq_len: usize) -> Self {
        Self { heads, seq_len, causal: true, alibi: false, key_mask: None }
    }

    pub fn with_alibi(mut self, on: bool) -> Self {
        self.alibi = on;
        self
    }

    pub fn with_key_mask(mut self, mask: Vec<bool>) -> Self {
        self.key_mask = Some(Arc::new(mask));
        self
    }
}

/// ALiBi slope for head `h` of `heads`: `2^(-8 (h + 1) / heads)`.
pub fn alibi_slope(h: usize, heads: usize) -> f32 {
    2f32.powf(-8.0 * (h as f32 + 1.0) / heads as f32)
}

/// Forward operator kinds together with their attributes.
#[derive(Clone, Debug)]
pub enum Primitive {
    /// `a · b`, or `a · bᵀ` when `trans_b` is set.
    MatMul { trans_b: bool },
    /// Elementwise sum; `b` may be a single row broadcast over `a`'s rows.
    Add,
    /// Elementwise product with the same broadcasting rule as `Add`.
    Mul,
    Scale(f32),
    /// `x · W + b` with optional bias as third input.
    Linear,
    EmbeddingLookup { ids: Vec<usize> },
    Softmax { axis: usize },
    /// Mean over rows of `-log softmax(logits)[target]`; scalar output.
    CrossEntropyWithLogits { targets: Vec<usize> },
    CausalMultiheadAttention(AttentionConfig),
    RmsNorm { eps: f32 },
    LayerNorm { eps: f32 },
    Silu,
    Gelu,
    Relu,
    Dropout { p: f32 },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    SumAll,
    SumAxis { axis: usize },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul { .. } => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::Linear => "linear",
            Primitive::EmbeddingLookup { .. } => "embedding_lookup",
            Primitive::Softmax { .. } => "softmax",
            Primitive::CrossEntropyWithLogits { .. } => "cross_entropy_with_logits",
            Primitive::CausalMultiheadAttention(_) => "causal_multihead_attention",
            Primitive::RmsNorm { .. } => "rms_norm",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::Silu => "silu",
            Primitive::Gelu => "gelu",
            Primitive::Relu => "relu",
            Primitive::Dropout { .. } => "dropout",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::SumAll => "sum_all",
            Primitive::SumAxis { .. } => "sum_axis",
        }
    }
}

enum NodeKind {
    Leaf(Option<ParamKey>),
    Op(Primitive),
}

enum Saved {
    None,
    Tensor(Tensor),
    Norm { xhat: Tensor, inv: Vec<f32> },
    Mask(Vec<f32>),
}

struct Node {
    value: Arc<Tensor>,
    kind: NodeKind,
    inputs: Vec<Var>,
    saved: Saved,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    seed: u64,
    dropout_calls: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph in evaluation mode: dropout is the identity.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), training: false, seed: 0, dropout_calls: 0 }
    }

    /// A graph in training mode; `seed` drives the dropout masks.
    pub fn training(seed: u64) -> Self {
        Self { nodes: Vec::new(), training: true, seed, dropout_calls: 0 }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, value: Arc<Tensor>, key: Option<ParamKey>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            kind: NodeKind::Leaf(key),
            inputs: Vec::new(),
            saved: Saved::None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(Arc::new(value), None, false)
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.push_leaf(value, None, false)
    }

    /// Leaf bound to a stored parameter; it is differentiable iff the
    /// parameter's `requires_grad` flag is set.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let requires_grad = store.param(id).requires_grad;
        self.push_leaf(store.shared(id), Some(store.key(id)), requires_grad)
    }

    /// Applies one primitive. Dropout in eval mode (or with `p == 0`)
    /// returns its input unchanged and records nothing.
    pub fn forward_primitive(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        let op = kind.name();
        let arity_ok = match &kind {
            Primitive::MatMul { .. } | Primitive::Add | Primitive::Mul => inputs.len() == 2,
            Primitive::Linear => inputs.len() == 2 || inputs.len() == 3,
            Primitive::CausalMultiheadAttention(_) | Primitive::LayerNorm { .. } => inputs.len() == 3,
            Primitive::RmsNorm { .. } => inputs.len() == 2,
            Primitive::Concat { .. } => !inputs.is_empty(),
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(AutodiffError::Arity { op, got: inputs.len() });
        }
        if let Primitive::Dropout { p } = kind {
            if !(0.0..1.0).contains(&p) {
                return Err(AutodiffError::Invalid(format!("dropout probability {p} outside [0, 1)")));
            }
            if !self.training || p == 0.0 {
                return Ok(inputs[0]);
            }
        }
        let vals: Vec<Arc<Tensor>> = inputs.iter().map(|v| Arc::clone(&self.nodes[v.0].value)).collect();
        let vals_ref: Vec<&Tensor> = vals.iter().map(|a| a.as_ref()).collect();
        let (value, saved) = match &kind {
            Primitive::Dropout { p } => {
                let stream = self.dropout_calls;
                self.dropout_calls += 1;
                let mask = dropout_mask(self.seed, stream, vals_ref[0].numel(), *p);
                let data = vals_ref[0].data().iter().zip(&mask).map(|(x, m)| x * m).collect();
                (Tensor::from_parts(vals_ref[0].shape().to_vec(), data), Saved::Mask(mask))
            }
            other => compute(other, &vals_ref)?,
        };
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            kind: NodeKind::Op(kind),
            inputs: inputs.to_vec(),
            saved: if requires_grad { saved } else { Saved::None },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_primitive(Primitive::MatMul { trans_b: false }, &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_primitive(Primitive::MatMul { trans_b: true }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_primitive(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_primitive(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        self.forward_primitive(Primitive::Scale(s), &[a])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        match b {
            Some(b) => self.forward_primitive(Primitive::Linear, &[x, w, b]),
            None => self.forward_primitive(Primitive::Linear, &[x, w]),
        }
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.forward_primitive(Primitive::EmbeddingLookup { ids: ids.to_vec() }, &[table])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.forward_primitive(Primitive::Softmax { axis }, &[a])
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.forward_primitive(Primitive::CrossEntropyWithLogits { targets: targets.to_vec() }, &[logits])
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, cfg: AttentionConfig) -> Result<Var> {
        self.forward_primitive(Primitive::CausalMultiheadAttention(cfg), &[q, k, v])
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f32) -> Result<Var> {
        self.forward_primitive(Primitive::RmsNorm { eps }, &[x, gain])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        self.forward_primitive(Primitive::LayerNorm { eps }, &[x, gain, bias])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.forward_primitive(Primitive::Silu, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.forward_primitive(Primitive::Gelu, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.forward_primitive(Primitive::Relu, &[a])
    }

    pub fn dropout(&mut self, a: Var, p: f32) -> Result<Var> {
        self.forward_primitive(Primitive::Dropout { p }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.forward_primitive(Primitive::Concat { axis }, parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.forward_primitive(Primitive::Slice { axis, start, len }, &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.forward_primitive(Primitive::SumAll, &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.forward_primitive(Primitive::SumAxis { axis }, &[a])
    }

    /// Column means over rows, shape `[1, cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, _) = dims2(self.shape(a));
        let s = self.sum_axis(a, 0)?;
        self.scale(s, 1.0 / r as f32)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Only leaves bound to parameters with `requires_grad` appear in the
    /// result. A loss with no path to any such parameter yields an empty map.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut out = Gradients::new();
        if !loss_node.requires_grad {
            log::warn!("backward: loss is detached from every trainable parameter");
            return Ok(out);
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_node.value.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.kind {
                NodeKind::Leaf(Some(key)) => out.accumulate(*key, g),
                NodeKind::Leaf(None) => {}
                NodeKind::Op(kind) => self.backward_node(kind, node, &g, &mut grads)?,
            }
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, kind: &Primitive, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let inp = &node.inputs;
        let val = |i: usize| -> &Tensor { &self.nodes[inp[i].0].value };
        match kind {
            Primitive::MatMul { trans_b } => {
                let a = val(0);
                let b = val(1);
                let (m, k) = a.dims2();
                let n = g.dims2().1;
                if self.wants(inp[0]) {
                    let mut da = vec![0.0; m * k];
                    // dA = G · Bᵀ  (or G · B when b was transposed)
                    gemm(m, n, k, g.data(), false, b.data(), !trans_b, 0.0, &mut da);
                    accumulate(grads, inp[0], Tensor::from_parts(a.shape().to_vec(), da));
                }
                if self.wants(inp[1]) {
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        // dB = Gᵀ · A, shape n x k
                        gemm(n, m, k, g.data(), true, a.data(), false, 0.0, &mut db);
                    } else {
                        gemm(k, m, n, a.data(), true, g.data(), false, 0.0, &mut db);
                    }
                    accumulate(grads, inp[1], Tensor::from_parts(b.shape().to_vec(), db));
                }
            }
            Primitive::Add => {
                if self.wants(inp[0]) {
                    accumulate(grads, inp[0], g.clone());
                }
                if self.wants(inp[1]) {
                    accumulate(grads, inp[1], reduce_broadcast(g, val(1)));
                }
            }
            Primitive::Mul => {
                let a = val(0);
                let b = val(1);
                if self.wants(inp[0]) {
                    let (_, c) = a.dims2();
                    let bcast = b.numel() != a.numel();
                    let da = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * if bcast { b.data()[i % c] } else { b.data()[i] })
                        .collect();
                    accumulate(grads, inp[0], Tensor::from_parts(a.shape().to_vec(), da));
                }
                if self.wants(inp[1]) {
                    let prod = Tensor::from_parts(
                        g.shape().to_vec(),
                        g.data().iter().zip(a.data()).map(|(x, y)| x * y).collect(),
                    );
                    accumulate(grads, inp[1], reduce_broadcast(&prod, b));
                }
            }
            Primitive::Scale(s) => {
                if self.wants(inp[0]) {
                    let mut d = g.clone();
                    d.scale_in_place(*s);
                    accumulate(grads, inp[0], d);
                }
            }
            Primitive::Linear => {
                let x = val(0);
                let w = val(1);
                let (m, k) = x.dims2();
                let n = w.dims2().1;
                if self.wants(inp[0]) {
                    let mut dx = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, w.data(), true, 0.0, &mut dx);
                    accumulate(grads, inp[0], Tensor::from_parts(x.shape().to_vec(), dx));
                }
                if self.wants(inp[1]) {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, m, n, x.data(), true, g.data(), false, 0.0, &mut dw);
                    accumulate(grads, inp[1], Tensor::from_parts(w.shape().to_vec(), dw));
                }
                if inp.len() == 3 && self.wants(inp[2]) {
                    accumulate(grads, inp[2], reduce_broadcast(g, val(2)));
                }
            }
            Primitive::EmbeddingLookup { ids } => {
                if self.wants(inp[0]) {
                    let table = val(0);
                    let mut dt = Tensor::zeros(table.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, s) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    accumulate(grads, inp[0], dt);
                }
            }
            Primitive::Softmax { axis } => {
                if self.wants(inp[0]) {
                    let y = &node.value;
                    let mut dx = vec![0.0; y.numel()];
                    for_each_lane(y.shape(), *axis, |lane| {
                        let s: f64 = lane.clone().map(|i| g.data()[i] as f64 * y.data()[i] as f64).sum();
                        for i in lane {
                            dx[i] = y.data()[i] * (g.data()[i] - s as f32);
                        }
                    });
                    accumulate(grads, inp[0], Tensor::from_parts(y.shape().to_vec(), dx));
                }
            }
            Primitive::CrossEntropyWithLogits { targets } => {
                if self.wants(inp[0]) {
                    let Saved::Tensor(probs) = &node.saved else { unreachable!() };
                    let (r, c) = probs.dims2();
                    let coef = g.item() / r as f32;
                    let mut d = probs.data().to_vec();
                    for (row, &t) in targets.iter().enumerate() {
                        d[row * c + t] -= 1.0;
                    }
                    for v in &mut d {
                        *v *= coef;
                    }
                    accumulate(grads, inp[0], Tensor::from_parts(probs.shape().to_vec(), d));
                }
            }
            Primitive::CausalMultiheadAttention(cfg) => {
                let Saved::Tensor(probs) = &node.saved else { unreachable!() };
                let (dq, dk, dv) = attention_backward(cfg, val(0), val(1), val(2), probs, g);
                if self.wants(inp[0]) {
                    accumulate(grads, inp[0], dq);
                }
                if self.wants(inp[1]) {
                    accumulate(grads, inp[1], dk);
                }
                if self.wants(inp[2]) {
                    accumulate(grads, inp[2], dv);
                }
            }
            Primitive::RmsNorm { .. } | Primitive::LayerNorm { .. } => {
                let Saved::Norm { xhat, inv } = &node.saved else { unreachable!() };
                let centered = matches!(kind, Primitive::LayerNorm { .. });
                let gain = val(1);
                let (r, c) = xhat.dims2();
                if self.wants(inp[0]) {
                    let mut dx = vec![0.0; r * c];
                    for row in 0..r {
                        let gr = g.row(row);
                        let xr = xhat.row(row);
                        let dxhat: Vec<f32> = gr.iter().zip(gain.data()).map(|(a, b)| a * b).collect();
                        let m_dot: f64 =
                            dxhat.iter().zip(xr).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>() / c as f64;
                        let m_sum: f64 = if centered {
                            dxhat.iter().map(|&a| a as f64).sum::<f64>() / c as f64
                        } else {
                            0.0
                        };
                        for j in 0..c {
                            dx[row * c + j] =
                                inv[row] * (dxhat[j] - m_sum as f32 - xr[j] * m_dot as f32);
                        }
                    }
                    accumulate(grads, inp[0], Tensor::from_parts(val(0).shape().to_vec(), dx));
                }
                if self.wants(inp[1]) {
                    let mut dg = vec![0.0f32; c];
                    for row in 0..r {
                        for ((d, a), b) in dg.iter_mut().zip(g.row(row)).zip(xhat.row(row)) {
                            *d += a * b;
                        }
                    }
                    accumulate(grads, inp[1], Tensor::from_parts(gain.shape().to_vec(), dg));
                }
                if centered && self.wants(inp[2]) {
                    accumulate(grads, inp[2], reduce_broadcast(g, val(2)));
                }
            }
            Primitive::Silu | Primitive::Gelu | Primitive::Relu => {
                if self.wants(inp[0]) {
                    let x = val(0);
                    let deriv: fn(f32) -> f32 = match kind {
                        Primitive::Silu => silu_grad,
                        Primitive::Gelu => gelu_grad,
                        _ => |x| if x > 0.0 { 1.0 } else { 0.0 },
                    };
                    let d = x.data().iter().zip(g.data()).map(|(&xv, &gv)| gv * deriv(xv)).collect();
                    accumulate(grads, inp[0], Tensor::from_parts(x.shape().to_vec(), d));
                }
            }
            Primitive::Dropout { .. } => {
                if self.wants(inp[0]) {
                    let Saved::Mask(mask) = &node.saved else { unreachable!() };
                    let d = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                    accumulate(grads, inp[0], Tensor::from_parts(g.shape().to_vec(), d));
                }
            }
            Primitive::Concat { axis } => {
                let (_, total_c) = g.dims2();
                let mut offset = 0;
                for &v in inp.iter() {
                    let part = &self.nodes[v.0].value;
                    let (pr, pc) = part.dims2();
                    if self.wants(v) {
                        let d = if *axis == 0 {
                            g.data()[offset * total_c..(offset + pr) * total_c].to_vec()
                        } else {
                            (0..pr).flat_map(|r| g.row(r)[offset..offset + pc].iter().copied()).collect()
                        };
                        accumulate(grads, v, Tensor::from_parts(part.shape().to_vec(), d));
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Primitive::Slice { axis, start, len } => {
                if self.wants(inp[0]) {
                    let a = val(0);
                    let (r, c) = a.dims2();
                    let mut d = vec![0.0; r * c];
                    if *axis == 0 {
                        d[start * c..(start + len) * c].copy_from_slice(g.data());
                    } else {
                        for row in 0..r {
                            d[row * c + start..row * c + start + len].copy_from_slice(g.row(row));
                        }
                    }
                    accumulate(grads, inp[0], Tensor::from_parts(a.shape().to_vec(), d));
                }
            }
            Primitive::SumAll => {
                if self.wants(inp[0]) {
                    accumulate(grads, inp[0], Tensor::full(val(0).shape(), g.item()));
                }
            }
            Primitive::SumAxis { axis } => {
                if self.wants(inp[0]) {
                    let a = val(0);
                    let (r, c) = a.dims2();
                    let d = (0..r * c)
                        .map(|i| if *axis == 0 { g.data()[i % c] } else { g.data()[i / c] })
                        .collect();
                    accumulate(grads, inp[0], Tensor::from_parts(a.shape().to_vec(), d));
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Sums `g` down to `target`'s shape when `target` was broadcast as a row.
fn reduce_broadcast(g: &Tensor, target: &Tensor) -> Tensor {
    if g.numel() == target.numel() {
        return Tensor::from_parts(target.shape().to_vec(), g.data().to_vec());
    }
    let (r, c) = g.dims2();
    let mut acc = vec![0.0f64; c];
    for row in 0..r {
        for (a, &v) in acc.iter_mut().zip(g.row(row)) {
            *a += v as f64;
        }
    }
    Tensor::from_parts(target.shape().to_vec(), acc.into_iter().map(|v| v as f32).collect())
}

/// Calls `f` with the flat index range of every lane along `axis`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(LaneIter)) {
    let (r, c) = dims2(shape);
    if axis + 1 == shape.len().max(1) {
        for row in 0..r {
            f(LaneIter { next: row * c, step: 1, left: c });
        }
    } else {
        for col in 0..c {
            f(LaneIter { next: col, step: c, left: r });
        }
    }
}

#[derive(Clone)]
struct LaneIter {
    next: usize,
    step: usize,
    left: usize,
}

impl Iterator for LaneIter {
    type Item = usize;
    fn next(&mut self) -> Option<usize> {
        if self.left == 0 {
            return None;
        }
        let i = self.next;
        self.next += self.step;
        self.left -= 1;
        Some(i)
    }
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

/// `b` must match `a` exactly or be one row of `a`'s width.
fn check_broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.shape() == b.shape() {
        return Ok(false);
    }
    let (_, ac) = a.dims2();
    let (br, bc) = b.dims2();
    if br == 1 && bc == ac {
        Ok(true)
    } else {
        Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() > 2 {
        return Err(shape_err(op, format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok(t.dims2())
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Scaled keep-mask for inverted dropout: each entry is `0` or `1 / (1 - p)`.
///
/// The mask depends only on `(seed, stream, index)`, so reruns reproduce it.
pub fn dropout_mask(seed: u64, stream: u64, len: usize, p: f32) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let keep = 1.0 / (1.0 - p);
    (0..len).map(|_| if rng.random::<f32>() < p { 0.0 } else { keep }).collect()
}

fn compute(kind: &Primitive, x: &[&Tensor]) -> Result<(Tensor, Saved)> {
    let op = kind.name();
    Ok(match kind {
        Primitive::MatMul { trans_b } => {
            let (m, k) = x[0].dims2();
            let (br, bc) = require_2d(op, x[1])?;
            let (k2, n) = if *trans_b { (bc, br) } else { (br, bc) };
            if k != k2 {
                return Err(shape_err(op, format!("{:?} x {:?} (trans_b={})", x[0].shape(), x[1].shape(), trans_b)));
            }
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, x[0].data(), false, x[1].data(), *trans_b, 0.0, &mut c);
            (Tensor::from_parts(vec![m, n], c), Saved::None)
        }
        Primitive::Add | Primitive::Mul => {
            let bcast = check_broadcast(op, x[0], x[1])?;
            let (_, c) = x[0].dims2();
            let b = x[1].data();
            let add = matches!(kind, Primitive::Add);
            let data = x[0]
                .data()
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    let bv = if bcast { b[i % c] } else { b[i] };
                    if add {
                        a + bv
                    } else {
                        a * bv
                    }
                })
                .collect();
            (Tensor::from_parts(x[0].shape().to_vec(), data), Saved::None)
        }
        Primitive::Scale(s) => (
            Tensor::from_parts(x[0].shape().to_vec(), x[0].data().iter().map(|v| v * s).collect()),
            Saved::None,
        ),
        Primitive::Linear => {
            let (m, k) = x[0].dims2();
            let (k2, n) = require_2d(op, x[1])?;
            if k != k2 {
                return Err(shape_err(op, format!("x {:?} vs W {:?}", x[0].shape(), x[1].shape())));
            }
            let mut c = vec![0.0; m * n];
            if let Some(b) = x.get(2) {
                if b.numel() != n {
                    return Err(shape_err(op, format!("bias {:?} vs out width {}", b.shape(), n)));
                }
                for row in c.chunks_mut(n) {
                    row.copy_from_slice(b.data());
                }
                gemm(m, k, n, x[0].data(), false, x[1].data(), false, 1.0, &mut c);
            } else {
                gemm(m, k, n, x[0].data(), false, x[1].data(), false, 0.0, &mut c);
            }
            (Tensor::from_parts(vec![m, n], c), Saved::None)
        }
        Primitive::EmbeddingLookup { ids } => {
            let (v, d) = require_2d(op, x[0])?;
            if ids.is_empty() {
                return Err(shape_err(op, "empty id list".into()));
            }
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(AutodiffError::Index { op, index: id, len: v });
                }
                out.extend_from_slice(x[0].row(id));
            }
            (Tensor::from_parts(vec![ids.len(), d], out), Saved::None)
        }
        Primitive::Softmax { axis } => {
            let nd = x[0].shape().len().max(1);
            if !(*axis + 1 == nd || (*axis == 0 && nd == 2)) {
                return Err(shape_err(op, format!("axis {} unsupported for {:?}", axis, x[0].shape())));
            }
            let mut out = vec![0.0; x[0].numel()];
            let src = x[0].data();
            for_each_lane(x[0].shape(), *axis, |lane| {
                let max = lane.clone().map(|i| src[i]).fold(f32::NEG_INFINITY, f32::max);
                let sum: f64 = lane.clone().map(|i| ((src[i] - max) as f64).exp()).sum();
                for i in lane {
                    out[i] = (((src[i] - max) as f64).exp() / sum) as f32;
                }
            });
            (Tensor::from_parts(x[0].shape().to_vec(), out), Saved::None)
        }
        Primitive::CrossEntropyWithLogits { targets } => {
            let (r, c) = x[0].dims2();
            if targets.len() != r {
                return Err(shape_err(op, format!("{} targets for {} rows", targets.len(), r)));
            }
            let mut probs = vec![0.0; r * c];
            let mut total = 0.0f64;
            for (row, &t) in targets.iter().enumerate() {
                if t >= c {
                    return Err(AutodiffError::Index { op, index: t, len: c });
                }
                let l = x[0].row(row);
                let max = l.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let sum: f64 = l.iter().map(|&v| ((v - max) as f64).exp()).sum();
                let lse = max as f64 + sum.ln();
                total += lse - l[t] as f64;
                for (p, &v) in probs[row * c..(row + 1) * c].iter_mut().zip(l) {
                    *p = (((v - max) as f64).exp() / sum) as f32;
                }
            }
            (
                Tensor::scalar((total / r as f64) as f32),
                Saved::Tensor(Tensor::from_parts(vec![r, c], probs)),
            )
        }
        Primitive::CausalMultiheadAttention(cfg) => {
            let (out, probs) = attention_forward(cfg, x[0], x[1], x[2])?;
            (out, Saved::Tensor(probs))
        }
        Primitive::RmsNorm { eps } | Primitive::LayerNorm { eps } => {
            let centered = matches!(kind, Primitive::LayerNorm { .. });
            let (r, c) = x[0].dims2();
            if x[1].numel() != c || (centered && x[2].numel() != c) {
                return Err(shape_err(op, format!("x {:?} vs gain {:?}", x[0].shape(), x[1].shape())));
            }
            let mut xhat = vec![0.0; r * c];
            let mut inv = vec![0.0; r];
            let mut out = vec![0.0; r * c];
            for row in 0..r {
                let xr = x[0].row(row);
                let mean = if centered {
                    xr.iter().map(|&v| v as f64).sum::<f64>() / c as f64
                } else {
                    0.0
                };
                let ms = xr.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
                let iv = 1.0 / (ms + *eps as f64).sqrt();
                inv[row] = iv as f32;
                for j in 0..c {
                    let h = ((xr[j] as f64 - mean) * iv) as f32;
                    xhat[row * c + j] = h;
                    let mut y = h * x[1].data()[j];
                    if centered {
                        y += x[2].data()[j];
                    }
                    out[row * c + j] = y;
                }
            }
            (
                Tensor::from_parts(x[0].shape().to_vec(), out),
                Saved::Norm { xhat: Tensor::from_parts(x[0].shape().to_vec(), xhat), inv },
            )
        }
        Primitive::Silu | Primitive::Gelu | Primitive::Relu => {
            let f: fn(f32) -> f32 = match kind {
                Primitive::Silu => |v| v * sigmoid(v),
                Primitive::Gelu => gelu,
                _ => |v| v.max(0.0),
            };
            (Tensor::from_parts(x[0].shape().to_vec(), x[0].data().iter().map(|&v| f(v)).collect()), Saved::None)
        }
        Primitive::Dropout { .. } => unreachable!("handled by the caller"),
        Primitive::Concat { axis } => {
            if *axis > 1 {
                return Err(shape_err(op, format!("axis {axis} unsupported")));
            }
            let dims: Vec<(usize, usize)> = x.iter().map(|t| t.dims2()).collect();
            if *axis == 0 {
                let c = dims[0].1;
                if dims.iter().any(|d| d.1 != c) {
                    return Err(shape_err(op, format!("column mismatch {:?}", dims)));
                }
                let rows = dims.iter().map(|d| d.0).sum();
                let mut out = Vec::with_capacity(rows * c);
                for t in x {
                    out.extend_from_slice(t.data());
                }
                (Tensor::from_parts(vec![rows, c], out), Saved::None)
            } else {
                let r = dims[0].0;
                if dims.iter().any(|d| d.0 != r) {
                    return Err(shape_err(op, format!("row mismatch {:?}", dims)));
                }
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut out = Vec::with_capacity(r * cols);
                for row in 0..r {
                    for t in x {
                        out.extend_from_slice(t.row(row));
                    }
                }
                (Tensor::from_parts(vec![r, cols], out), Saved::None)
            }
        }
        Primitive::Slice { axis, start, len } => {
            let (r, c) = x[0].dims2();
            let extent = if *axis == 0 { r } else { c };
            if *axis > 1 || *len == 0 || start + len > extent {
                return Err(shape_err(op, format!("[{start}, {}) on axis {axis} of {:?}", start + len, x[0].shape())));
            }
            if *axis == 0 {
                (Tensor::from_parts(vec![*len, c], x[0].data()[start * c..(start + len) * c].to_vec()), Saved::None)
            } else {
                let out = (0..r).flat_map(|row| x[0].row(row)[*start..start + len].iter().copied()).collect();
                (Tensor::from_parts(vec![r, *len], out), Saved::None)
            }
        }
        Primitive::SumAll => {
            let s: f64 = x[0].data().iter().map(|&v| v as f64).sum();
            (Tensor::scalar(s as f32), Saved::None)
        }
        Primitive::SumAxis { axis } => {
            let (r, c) = x[0].dims2();
            match axis {
                0 => {
                    let mut acc = vec![0.0f64; c];
                    for row in 0..r {
                        for (a, &v) in acc.iter_mut().zip(x[0].row(row)) {
                            *a += v as f64;
                        }
                    }
                    (Tensor::from_parts(vec![1, c], acc.into_iter().map(|v| v as f32).collect()), Saved::None)
                }
                1 => {
                    let out = (0..r).map(|row| x[0].row(row).iter().map(|&v| v as f64).sum::<f64>() as f32).collect();
                    (Tensor::from_parts(vec![r, 1], out), Saved::None)
                }
                _ => return Err(shape_err(op, format!("axis {axis} unsupported"))),
            }
        }
    })
}

fn attention_forward(cfg: &AttentionConfig, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let op = "causal_multihead_attention";
    let (rows, d) = require_2d(op, q)?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(shape_err(op, format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape())));
    }
    let t = cfg.seq_len;
    let h = cfg.heads;
    if h == 0 || d % h != 0 || t == 0 || rows % t != 0 {
        return Err(shape_err(op, format!("{rows}x{d} with {h} heads, seq_len {t}")));
    }
    if let Some(mask) = &cfg.key_mask {
        if mask.len() != rows {
            return Err(shape_err(op, format!("key mask of {} for {} rows", mask.len(), rows)));
        }
    }
    let b = rows / t;
    let dh = d / h;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut probs = vec![0.0f32; b * h * t * t];
    let mut out = vec![0.0f32; rows * d];
    let mut scores = vec![0.0f32; t];
    let mut valid = vec![false; t];
    for bi in 0..b {
        for hi in 0..h {
            let slope = if cfg.alibi { alibi_slope(hi, h) } else { 0.0 };
            let cols = hi * dh..(hi + 1) * dh;
            for i in 0..t {
                let qi = &q.row(bi * t + i)[cols.clone()];
                let upto = if cfg.causal { i + 1 } else { t };
                let mut max = f32::NEG_INFINITY;
                for j in 0..t {
                    valid[j] = j < upto && cfg.key_mask.as_ref().is_none_or(|m| m[bi * t + j]);
                    if valid[j] {
                        let s = dot(qi, &k.row(bi * t + j)[cols.clone()]) * scale - slope * (i as f32 - j as f32);
                        scores[j] = s;
                        max = max.max(s);
                    }
                }
                if max == f32::NEG_INFINITY {
                    continue;
                }
                let mut sum = 0.0f64;
                for j in 0..t {
                    if valid[j] {
                        scores[j] = (scores[j] - max).exp();
                        sum += scores[j] as f64;
                    }
                }
                let inv = (1.0 / sum) as f32;
                let prow = &mut probs[((bi * h + hi) * t + i) * t..][..t];
                let orow = &mut out[(bi * t + i) * d + hi * dh..][..dh];
                for j in 0..t {
                    if !valid[j] {
                        continue;
                    }
                    let p = scores[j] * inv;
                    prow[j] = p;
                    for (o, &vv) in orow.iter_mut().zip(&v.row(bi * t + j)[cols.clone()]) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![rows, d], out), Tensor::from_parts(vec![b * h * t * t], probs)))
}

fn attention_backward(
    cfg: &AttentionConfig,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (rows, d) = q.dims2();
    let t = cfg.seq_len;
    let h = cfg.heads;
    let b = rows / t;
    let dh = d / h;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut dq = vec![0.0f32; rows * d];
    let mut dk = vec![0.0f32; rows * d];
    let mut dv = vec![0.0f32; rows * d];
    let mut dp = vec![0.0f32; t];
    for bi in 0..b {
        for hi in 0..h {
            let off = hi * dh;
            for i in 0..t {
                let prow = &probs.data()[((bi * h + hi) * t + i) * t..][..t];
                let gi = &g.row(bi * t + i)[off..off + dh];
                let mut acc = 0.0f64;
                for j in 0..t {
                    if prow[j] == 0.0 {
                        continue;
                    }
                    let vj = &v.row(bi * t + j)[off..off + dh];
                    dp[j] = dot(gi, vj);
                    acc += prow[j] as f64 * dp[j] as f64;
                    let dvj = &mut dv[(bi * t + j) * d + off..][..dh];
                    for (a, &gv) in dvj.iter_mut().zip(gi) {
                        *a += prow[j] * gv;
                    }
                }
                let qi = &q.row(bi * t + i)[off..off + dh];
                for j in 0..t {
                    if prow[j] == 0.0 {
                        continue;
                    }
                    let ds = prow[j] * (dp[j] - acc as f32) * scale;
                    let kj = &k.row(bi * t + j)[off..off + dh];
                    let dqi = &mut dq[(bi * t + i) * d + off..][..dh];
                    for (a, &kv) in dqi.iter_mut().zip(kj) {
                        *a += ds * kv;
                    }
                    let dkj = &mut dk[(bi * t + j) * d + off..][..dh];
                    for (a, &qv) in dkj.iter_mut().zip(qi) {
                        *a += ds * qv;
                    }
                }
            }
        }
    }
    let shape = q.shape().to_vec();
    (
        Tensor::from_parts(shape.clone(), dq),
        Tensor::from_parts(shape.clone(), dk),
        Tensor::from_parts(shape, dv),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_uniform_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let y = g.softmax(x, 0).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_n() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 100]));
        let l = g.cross_entropy(x, &[7]).unwrap();
        assert!((g.value(l).item() - 100f32.ln()).abs() < 1e-5);
        assert!((g.value(l).item() - 4.60517).abs() < 1e-5);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(3));
        let a = g.constant(Tensor::from_fn(&[3, 4], |k| k as f32 - 5.5));
        let y = g.matmul(i, a).unwrap();
        assert_eq!(g.value(y), g.value(a));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        assert!(err.to_string().contains("[2, 3]"), "{err}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[f32::MAX, f32::MAX]));
        assert!(matches!(g.scale(a, 10.0), Err(AutodiffError::NonFinite { op: "scale" })));
    }

    #[test]
    fn linear_sum_grad_broadcasts_x() {
        // loss = sum(x · W) with W 2x3 (rows = input dim): dL/dW[i][j] = x[i]
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_fn(&[2, 3], |i| i as f32), true);
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[0.5, -2.0]));
        let wv = g.param(&store, w);
        let y = g.matmul(x, wv).unwrap();
        let l = g.sum_all(y).unwrap();
        let grads = g.backward(l).unwrap();
        let gw = grads.for_param(&store, w).unwrap();
        assert_eq!(gw.data(), &[0.5, 0.5, 0.5, -2.0, -2.0, -2.0]);
    }

    #[test]
    fn frozen_param_absent_from_gradients() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full(&[2], 1.0), true);
        let b = store.add("b", Tensor::full(&[2], 2.0), false);
        let mut g = Graph::new();
        let av = g.param(&store, a);
        let bv = g.param(&store, b);
        let p = g.mul(av, bv).unwrap();
        let l = g.sum_all(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.for_param(&store, a).is_some());
        assert!(grads.for_param(&store, b).is_none());
        assert_eq!(grads.len(), 1);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full(&[2], 1.0), true);
        let mut g = Graph::new();
        let av = g.param(&store, a);
        assert!(matches!(g.backward(av), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn detached_loss_gives_empty_map() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[3], 1.0));
        let l = g.sum_all(c).unwrap();
        assert!(g.backward(l).unwrap().is_empty());
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[4, 4], 1.0));
        let y = g.dropout(x, 0.5).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_masks_are_seeded() {
        let run = |seed| {
            let mut g = Graph::training(seed);
            let x = g.constant(Tensor::full(&[8, 8], 1.0));
            let y = g.dropout(x, 0.5).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
        let y = run(3);
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn attention_is_causal() {
        let base = Tensor::from_fn(&[5, 4], |i| ((i * 7 % 11) as f32 - 5.0) * 0.1);
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let y = g.attention(v, v, v, AttentionConfig::causal(2, 5).with_alibi(true)).unwrap();
            g.value(y).clone()
        };
        let before = run(&base);
        let mut perturbed = base.clone();
        for v in perturbed.row_mut(4) {
            *v += 3.0;
        }
        let after = run(&perturbed);
        assert_eq!(before.data()[..16], after.data()[..16]);
        assert_ne!(before.row(4), after.row(4));
    }

    #[test]
    fn fully_masked_query_outputs_zero() {
        let x = Tensor::from_fn(&[3, 2], |i| i as f32 * 0.3);
        let mut g = Graph::new();
        let v = g.constant(x);
        let cfg = AttentionConfig::causal(1, 3).with_key_mask(vec![false, true, true]);
        let y = g.attention(v, v, v, cfg).unwrap();
        assert_eq!(g.value(y).row(0), &[0.0, 0.0]);
        assert_ne!(g.value(y).row(1), &[0.0, 0.0]);
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let mut g = Graph::new();
        let tbl = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(g.embedding(tbl, &[1, 4]), Err(AutodiffError::Index { index: 4, .. })));
    }
}
