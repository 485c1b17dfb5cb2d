//! Reverse-mode automatic differentiation over dense row-major f64 tensors.
//!
//! A [`Tape`] records every primitive applied to tensors it owns; values are
//! computed eagerly at record time. [`Tape::backward`] replays the record in
//! reverse and accumulates gradients for every leaf created with
//! `requires_grad`. Replaying the tape forward reproduces the recorded values
//! bit-identically (`Tape::replay_matches`), which the tests rely on.
//!
//! Everything is double precision: the rank checks and entropy-floor
//! comparisons downstream are too fragile for f32.
//!
//! Shape mismatches and invalid op arguments are programming errors and
//! panic; domain errors (non-finite values showing up in a forward pass) are
//! detected by [`Tape::check_finite`].
//!
//! A tape is single-writer. Tensors are immutable once created, so separate
//! tapes may run on separate threads without coordination.

mod backward;
pub mod check;

use serde::{Deserialize, Serialize};

/// Index of a tensor on its tape.
pub type TensorId = usize;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            values.len(),
            "shape {:?} implies {} values, got {}",
            shape,
            numel,
            values.len()
        );
        Tensor { shape, values, requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Extent of the last axis (1 for true scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.values[0]
    }
}

/// How the right operand of an elementwise op lines up with the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Bcast {
    /// Identical shapes.
    Same,
    /// `b` is a vector matching `a`'s last axis, repeated over leading axes.
    TrailingVec,
    /// `b` matches `a` except its last axis has extent 1.
    KeepLast1,
    /// `b` is a single value.
    Scalar,
}

fn bcast_kind(a: &[usize], b: &[usize], bn: usize, an: usize) -> Bcast {
    if a == b {
        return Bcast::Same;
    }
    if bn == 1 {
        return Bcast::Scalar;
    }
    if b.len() == 1 && a.last() == b.last() {
        return Bcast::TrailingVec;
    }
    if b.len() == a.len()
        && b.last() == Some(&1)
        && a[..a.len() - 1] == b[..b.len() - 1]
    {
        return Bcast::KeepLast1;
    }
    panic!("incompatible elementwise shapes {:?} vs {:?} ({} vs {} values)", a, b, an, bn);
}

/// Recorded primitive. Input tensors are referenced by id; integer side data
/// (token ids, masks) lives inline so replay is self-contained.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId, bc: Bcast },
    Sub { a: TensorId, b: TensorId, bc: Bcast },
    Mul { a: TensorId, b: TensorId, bc: Bcast },
    Scale { a: TensorId, c: f64 },
    AddConst { a: TensorId, c: f64 },
    Exp { a: TensorId },
    Ln { a: TensorId },
    Softplus { a: TensorId },
    Gelu { a: TensorId },
    Recip { a: TensorId },
    Matmul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    Transpose2d { a: TensorId, rows: usize, cols: usize },
    Reshape { a: TensorId },
    Softmax { a: TensorId },
    LogSoftmax { a: TensorId },
    LogSumExp { a: TensorId, axis: usize, keepdim: bool },
    SumAxis { a: TensorId, axis: usize, keepdim: bool },
    SumAll { a: TensorId },
    MeanAll { a: TensorId },
    StackLast { parts: Vec<TensorId> },
    IndexSelect { a: TensorId, axis: usize, indices: Vec<usize> },
    Embedding { table: TensorId, ids: Vec<usize> },
    TakePerRow { a: TensorId, ids: Vec<usize> },
    GatherToken { table: TensorId, tokens: Vec<usize>, batch: usize },
    LogMix { x: TensorId, w: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    Dropout { x: TensorId, keep: f64, mask: Vec<bool> },
    Attention { q: TensorId, k: TensorId, v: TensorId, allowed: Vec<bool> },
    SplitHeads { x: TensorId, heads: usize },
    MergeHeads { x: TensorId, heads: usize },
    CrossEntropy { logits: TensorId, targets: Vec<isize> },
    MaskedMean { x: TensorId, mask: Vec<bool> },
}

pub(crate) struct Node {
    pub op: Op,
    pub value: Tensor,
    pub needs_grad: bool,
}

/// Single-writer record of primitive operations.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

/// Gradients per tape tensor, produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. tensor `id`. Zero-filled for tensors that
    /// require grad but are disconnected from the loss.
    pub fn get(&self, id: TensorId, numel: usize) -> Vec<f64> {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => vec![0.0; numel],
        }
    }

    pub fn get_ref(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> TensorId {
        #[cfg(debug_assertions)]
        {
            if !matches!(op, Op::Leaf) {
                debug_assert!(
                    value.values.iter().all(|v| v.is_finite()),
                    "non-finite value out of {:?}",
                    op
                );
            }
        }
        self.nodes.push(Node { op, value, needs_grad });
        self.nodes.len() - 1
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Record an input tensor.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        let ng = t.requires_grad;
        self.push(Op::Leaf, t, ng)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> TensorId {
        self.leaf(Tensor::new(shape, values))
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.leaf(Tensor::scalar(v))
    }

    fn record1(&mut self, op: Op, a: TensorId) -> TensorId {
        let value = self.compute(&op);
        self.push(op, value, self.needs(a))
    }

    fn record2(&mut self, op: Op, a: TensorId, b: TensorId) -> TensorId {
        let value = self.compute(&op);
        let ng = self.needs(a) || self.needs(b);
        self.push(op, value, ng)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let bc = self.bcast(a, b);
        self.record2(Op::Add { a, b, bc }, a, b)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let bc = self.bcast(a, b);
        self.record2(Op::Sub { a, b, bc }, a, b)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let bc = self.bcast(a, b);
        self.record2(Op::Mul { a, b, bc }, a, b)
    }

    fn bcast(&self, a: TensorId, b: TensorId) -> Bcast {
        let (ta, tb) = (self.value(a), self.value(b));
        bcast_kind(&ta.shape, &tb.shape, tb.numel(), ta.numel())
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        self.record1(Op::Scale { a, c }, a)
    }

    pub fn add_const(&mut self, a: TensorId, c: f64) -> TensorId {
        self.record1(Op::AddConst { a, c }, a)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.record1(Op::Exp { a }, a)
    }

    pub fn ln(&mut self, a: TensorId) -> TensorId {
        self.record1(Op::Ln { a }, a)
    }

    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        self.record1(Op::Softplus { a }, a)
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        self.record1(Op::Gelu { a }, a)
    }

    pub fn recip(&mut self, a: TensorId) -> TensorId {
        self.record1(Op::Recip { a }, a)
    }

    /// `a` is `[m, k]`, `b` is `[k, n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (&self.value(a).shape, &self.value(b).shape);
        assert!(sa.len() == 2 && sb.len() == 2, "matmul wants 2-d operands, got {:?} x {:?}", sa, sb);
        assert_eq!(sa[1], sb[0], "matmul inner extents differ: {:?} x {:?}", sa, sb);
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        self.record2(Op::Matmul { a, b, m, k, n }, a, b)
    }

    pub fn transpose2d(&mut self, a: TensorId) -> TensorId {
        let s = &self.value(a).shape;
        assert_eq!(s.len(), 2, "transpose2d wants a matrix, got {:?}", s);
        let (rows, cols) = (s[0], s[1]);
        self.record1(Op::Transpose2d { a, rows, cols }, a)
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> TensorId {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.value(a).numel(), "reshape {:?} -> {:?}", self.value(a).shape, shape);
        let mut value = self.value(a).clone();
        value.shape = shape;
        self.push(Op::Reshape { a }, value, self.needs(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: TensorId) -> TensorId {
        self.record1(Op::Softmax { a }, a)
    }

    pub fn log_softmax(&mut self, a: TensorId) -> TensorId {
        self.record1(Op::LogSoftmax { a }, a)
    }

    pub fn logsumexp(&mut self, a: TensorId, axis: usize, keepdim: bool) -> TensorId {
        assert!(axis < self.value(a).shape.len(), "logsumexp axis {} of {:?}", axis, self.value(a).shape);
        self.record1(Op::LogSumExp { a, axis, keepdim }, a)
    }

    pub fn sum_axis(&mut self, a: TensorId, axis: usize, keepdim: bool) -> TensorId {
        assert!(axis < self.value(a).shape.len(), "sum_axis axis {} of {:?}", axis, self.value(a).shape);
        self.record1(Op::SumAxis { a, axis, keepdim }, a)
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        self.record1(Op::SumAll { a }, a)
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        self.record1(Op::MeanAll { a }, a)
    }

    /// Stack same-shaped tensors along a fresh trailing axis.
    pub fn stack_last(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "stack_last of nothing");
        let s0 = self.value(parts[0]).shape.clone();
        for &p in parts {
            assert_eq!(self.value(p).shape, s0, "stack_last with mixed shapes");
        }
        let op = Op::StackLast { parts: parts.to_vec() };
        let value = self.compute(&op);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(op, value, ng)
    }

    pub fn index_select(&mut self, a: TensorId, axis: usize, indices: &[usize]) -> TensorId {
        let s = &self.value(a).shape;
        assert!(axis < s.len(), "index_select axis {} of {:?}", axis, s);
        for &i in indices {
            assert!(i < s[axis], "index {} out of axis extent {}", i, s[axis]);
        }
        self.record1(Op::IndexSelect { a, axis, indices: indices.to_vec() }, a)
    }

    /// Row gather: `table` is `[rows, d]`, output is `[ids.len(), d]`.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> TensorId {
        let s = &self.value(table).shape;
        assert_eq!(s.len(), 2, "embedding table must be 2-d, got {:?}", s);
        for &i in ids {
            assert!(i < s[0], "embedding id {} out of {} rows", i, s[0]);
        }
        self.record1(Op::Embedding { table, ids: ids.to_vec() }, table)
    }

    /// `a` is `[rows, v]`; picks `a[r, ids[r]]` giving `[rows]`.
    pub fn take_per_row(&mut self, a: TensorId, ids: &[usize]) -> TensorId {
        let s = &self.value(a).shape;
        assert_eq!(s.len(), 2, "take_per_row wants a matrix, got {:?}", s);
        assert_eq!(ids.len(), s[0], "one id per row");
        for &i in ids {
            assert!(i < s[1], "column id {} out of {}", i, s[1]);
        }
        self.record1(Op::TakePerRow { a, ids: ids.to_vec() }, a)
    }

    /// `table` is `[p, c, v]`, `tokens` is `batch * p` ids row-major;
    /// output `[batch, p, c]` holds `table[p, c, tokens[b, p]]`.
    pub fn gather_token(&mut self, table: TensorId, tokens: &[usize], batch: usize) -> TensorId {
        let s = &self.value(table).shape;
        assert_eq!(s.len(), 3, "gather_token table must be [p,c,v], got {:?}", s);
        assert_eq!(tokens.len(), batch * s[0], "tokens must be batch*p");
        for &t in tokens {
            assert!(t < s[2], "token {} out of vocabulary {}", t, s[2]);
        }
        self.record1(Op::GatherToken { table, tokens: tokens.to_vec(), batch }, table)
    }

    /// Log-space linear mixture: `x` is `[..., n, k]`, `w` is `[n, j, k]`
    /// holding log-weights; output `[..., n, j]` is
    /// `logsumexp_k(w[n,j,k] + x[..., n, k])`.
    pub fn log_mix(&mut self, x: TensorId, w: TensorId) -> TensorId {
        let (sx, sw) = (&self.value(x).shape, &self.value(w).shape);
        assert!(sx.len() >= 2, "log_mix input needs [..., n, k], got {:?}", sx);
        assert_eq!(sw.len(), 3, "log_mix weights need [n, j, k], got {:?}", sw);
        assert_eq!(sx[sx.len() - 2], sw[0], "node counts differ: {:?} vs {:?}", sx, sw);
        assert_eq!(sx[sx.len() - 1], sw[2], "channel counts differ: {:?} vs {:?}", sx, sw);
        self.record2(Op::LogMix { x, w }, x, w)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> TensorId {
        let d = self.value(x).last_dim();
        assert_eq!(self.value(gamma).shape, vec![d], "gamma must be [{}]", d);
        assert_eq!(self.value(beta).shape, vec![d], "beta must be [{}]", d);
        let op = Op::LayerNorm { x, gamma, beta, eps };
        let value = self.compute(&op);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(op, value, ng)
    }

    /// Inverted dropout; the keep mask is drawn here so replay is exact.
    /// Train-mode only: call sites skip this op in eval mode.
    pub fn dropout<R: rand::Rng>(&mut self, x: TensorId, rate: f64, rng: &mut R) -> TensorId {
        assert!((0.0..1.0).contains(&rate), "dropout rate {} outside [0,1)", rate);
        if rate == 0.0 {
            return x;
        }
        let n = self.value(x).numel();
        let mask: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= rate).collect();
        self.record1(Op::Dropout { x, keep: 1.0 - rate, mask }, x)
    }

    /// Masked scaled-dot-product attention. `q`, `k`, `v` are `[b, h, t, dh]`;
    /// `allowed` is a row-major `t x t` visibility matrix (query, key). Masking
    /// is additive: disallowed scores become -inf before the softmax.
    pub fn attention(&mut self, q: TensorId, k: TensorId, v: TensorId, allowed: &[bool]) -> TensorId {
        let s = self.value(q).shape.clone();
        assert_eq!(s.len(), 4, "attention wants [b,h,t,dh], got {:?}", s);
        assert_eq!(&self.value(k).shape, &s, "k shape mismatch");
        assert_eq!(&self.value(v).shape, &s, "v shape mismatch");
        let t = s[2];
        assert_eq!(allowed.len(), t * t, "allowed mask must be t*t");
        for i in 0..t {
            assert!(allowed[i * t + i], "attention row {} masks its own position", i);
        }
        let op = Op::Attention { q, k, v, allowed: allowed.to_vec() };
        let value = self.compute(&op);
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(op, value, ng)
    }

    /// `[b, t, d]` -> `[b, h, t, d/h]`.
    pub fn split_heads(&mut self, x: TensorId, heads: usize) -> TensorId {
        let s = &self.value(x).shape;
        assert_eq!(s.len(), 3, "split_heads wants [b,t,d], got {:?}", s);
        assert_eq!(s[2] % heads, 0, "hidden size {} not divisible by {} heads", s[2], heads);
        self.record1(Op::SplitHeads { x, heads }, x)
    }

    /// `[b, h, t, dh]` -> `[b, t, h*dh]`.
    pub fn merge_heads(&mut self, x: TensorId) -> TensorId {
        let s = &self.value(x).shape;
        assert_eq!(s.len(), 4, "merge_heads wants [b,h,t,dh], got {:?}", s);
        let heads = s[1];
        self.record1(Op::MergeHeads { x, heads }, x)
    }

    /// Mean cross-entropy between `logits` (`[rows, v]`) and integer targets;
    /// rows with target -1 are ignored. Panics if every row is ignored.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[isize]) -> TensorId {
        let s = &self.value(logits).shape;
        assert_eq!(s.len(), 2, "cross_entropy wants [rows, v], got {:?}", s);
        assert_eq!(targets.len(), s[0], "one target per row");
        let mut live = 0usize;
        for &t in targets {
            if t >= 0 {
                assert!((t as usize) < s[1], "target {} out of vocabulary {}", t, s[1]);
                live += 1;
            }
        }
        assert!(live > 0, "cross_entropy with every row ignored");
        self.record1(Op::CrossEntropy { logits, targets: targets.to_vec() }, logits)
    }

    /// Mean of the entries of `x` selected by `mask`. Panics on an empty mask.
    pub fn masked_mean(&mut self, x: TensorId, mask: &[bool]) -> TensorId {
        assert_eq!(mask.len(), self.value(x).numel(), "mask length mismatch");
        assert!(mask.iter().any(|&m| m), "masked_mean with empty mask");
        self.record1(Op::MaskedMean { x, mask: mask.to_vec() }, x)
    }

    /// Scans every recorded value; the first non-finite entry is an error.
    pub fn check_finite(&self) -> crate::Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if node.value.values.iter().any(|v| !v.is_finite()) {
                return Err(crate::Error::NonFinite(format!("tape op #{i} {:?}", kind_name(&node.op))));
            }
        }
        Ok(())
    }

    /// Recomputes every non-leaf value from its inputs and compares
    /// bit-for-bit against the recorded values.
    pub fn replay_matches(&self) -> bool {
        for node in &self.nodes {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let recomputed = self.compute(&node.op);
            if recomputed.shape != node.value.shape {
                return false;
            }
            let same = recomputed
                .values
                .iter()
                .zip(&node.value.values)
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return false;
            }
        }
        true
    }
}

fn kind_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::AddConst { .. } => "add_const",
        Op::Exp { .. } => "exp",
        Op::Ln { .. } => "ln",
        Op::Softplus { .. } => "softplus",
        Op::Gelu { .. } => "gelu",
        Op::Recip { .. } => "recip",
        Op::Matmul { .. } => "matmul",
        Op::Transpose2d { .. } => "transpose2d",
        Op::Reshape { .. } => "reshape",
        Op::Softmax { .. } => "softmax",
        Op::LogSoftmax { .. } => "log_softmax",
        Op::LogSumExp { .. } => "logsumexp",
        Op::SumAxis { .. } => "sum_axis",
        Op::SumAll { .. } => "sum_all",
        Op::MeanAll { .. } => "mean_all",
        Op::StackLast { .. } => "stack_last",
        Op::IndexSelect { .. } => "index_select",
        Op::Embedding { .. } => "embedding",
        Op::TakePerRow { .. } => "take_per_row",
        Op::GatherToken { .. } => "gather_token",
        Op::LogMix { .. } => "log_mix",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Dropout { .. } => "dropout",
        Op::Attention { .. } => "attention",
        Op::SplitHeads { .. } => "split_heads",
        Op::MergeHeads { .. } => "merge_heads",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::MaskedMean { .. } => "masked_mean",
    }
}

// ---------------------------------------------------------------------------
// Forward kernels
// ---------------------------------------------------------------------------

/// Numerically stable logsumexp of a strided slice view.
pub fn logsumexp_slice(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for v in vals.clone() {
        if v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = vals.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    // tanh approximation
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    // log(1 + e^x) without overflow on either tail
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
pub(crate) fn axis_view(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, extent, inner)
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

impl Tape {
    /// Pure forward evaluation of one op from recorded inputs. Used both at
    /// record time and by `replay_matches`.
    pub(crate) fn compute(&self, op: &Op) -> Tensor {
        match op {
            Op::Leaf => unreachable!("leaves are not recomputed"),
            Op::Add { a, b, bc } => self.ewise(*a, *b, *bc, |x, y| x + y),
            Op::Sub { a, b, bc } => self.ewise(*a, *b, *bc, |x, y| x - y),
            Op::Mul { a, b, bc } => self.ewise(*a, *b, *bc, |x, y| x * y),
            Op::Scale { a, c } => self.map(*a, |x| x * c),
            Op::AddConst { a, c } => self.map(*a, |x| x + c),
            Op::Exp { a } => self.map(*a, |x| x.exp()),
            Op::Ln { a } => self.map(*a, |x| x.ln()),
            Op::Softplus { a } => self.map(*a, softplus_scalar),
            Op::Gelu { a } => self.map(*a, gelu_scalar),
            Op::Recip { a } => self.map(*a, |x| 1.0 / x),
            Op::Matmul { a, b, m, k, n } => {
                let (av, bv) = (&self.value(*a).values, &self.value(*b).values);
                let mut out = vec![0.0; m * n];
                for i in 0..*m {
                    for kk in 0..*k {
                        let aik = av[i * k + kk];
                        if aik == 0.0 {
                            continue;
                        }
                        let brow = &bv[kk * n..(kk + 1) * n];
                        let orow = &mut out[i * n..(i + 1) * n];
                        for j in 0..*n {
                            orow[j] += aik * brow[j];
                        }
                    }
                }
                Tensor::new(vec![*m, *n], out)
            }
            Op::Transpose2d { a, rows, cols } => {
                let av = &self.value(*a).values;
                let mut out = vec![0.0; rows * cols];
                for i in 0..*rows {
                    for j in 0..*cols {
                        out[j * rows + i] = av[i * cols + j];
                    }
                }
                Tensor::new(vec![*cols, *rows], out)
            }
            Op::Reshape { a } => self.value(*a).clone(),
            Op::Softmax { a } => {
                let t = self.value(*a);
                let d = t.last_dim();
                let mut out = t.values.clone();
                for row in out.chunks_mut(d) {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        s += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= s;
                    }
                }
                Tensor::new(t.shape.clone(), out)
            }
            Op::LogSoftmax { a } => {
                let t = self.value(*a);
                let d = t.last_dim();
                let mut out = t.values.clone();
                for row in out.chunks_mut(d) {
                    let lse = logsumexp_slice(row.iter().cloned());
                    for v in row.iter_mut() {
                        *v -= lse;
                    }
                }
                Tensor::new(t.shape.clone(), out)
            }
            Op::LogSumExp { a, axis, keepdim } => {
                let t = self.value(*a);
                let (outer, extent, inner) = axis_view(&t.shape, *axis);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * extent * inner + i;
                        out[o * inner + i] = logsumexp_slice(
                            (0..extent).map(|e| t.values[base + e * inner]),
                        );
                    }
                }
                Tensor::new(reduced_shape(&t.shape, *axis, *keepdim), out)
            }
            Op::SumAxis { a, axis, keepdim } => {
                let t = self.value(*a);
                let (outer, extent, inner) = axis_view(&t.shape, *axis);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for e in 0..extent {
                        for i in 0..inner {
                            out[o * inner + i] += t.values[o * extent * inner + e * inner + i];
                        }
                    }
                }
                Tensor::new(reduced_shape(&t.shape, *axis, *keepdim), out)
            }
            Op::SumAll { a } => Tensor::scalar(self.value(*a).values.iter().sum()),
            Op::MeanAll { a } => {
                let t = self.value(*a);
                Tensor::scalar(t.values.iter().sum::<f64>() / t.numel() as f64)
            }
            Op::StackLast { parts } => {
                let first = self.value(parts[0]);
                let each = first.numel();
                let k = parts.len();
                let mut out = vec![0.0; each * k];
                for (pi, &p) in parts.iter().enumerate() {
                    for (i, &v) in self.value(p).values.iter().enumerate() {
                        out[i * k + pi] = v;
                    }
                }
                let mut shape = first.shape.clone();
                shape.push(k);
                Tensor::new(shape, out)
            }
            Op::IndexSelect { a, axis, indices } => {
                let t = self.value(*a);
                let (outer, extent, inner) = axis_view(&t.shape, *axis);
                let mut out = vec![0.0; outer * indices.len() * inner];
                for o in 0..outer {
                    for (ei, &e) in indices.iter().enumerate() {
                        let src = o * extent * inner + e * inner;
                        let dst = o * indices.len() * inner + ei * inner;
                        out[dst..dst + inner].copy_from_slice(&t.values[src..src + inner]);
                    }
                }
                let mut shape = t.shape.clone();
                shape[*axis] = indices.len();
                Tensor::new(shape, out)
            }
            Op::Embedding { table, ids } => {
                let t = self.value(*table);
                let d = t.shape[1];
                let mut out = vec![0.0; ids.len() * d];
                for (r, &id) in ids.iter().enumerate() {
                    out[r * d..(r + 1) * d].copy_from_slice(&t.values[id * d..(id + 1) * d]);
                }
                Tensor::new(vec![ids.len(), d], out)
            }
            Op::TakePerRow { a, ids } => {
                let t = self.value(*a);
                let v = t.shape[1];
                let out = ids.iter().enumerate().map(|(r, &i)| t.values[r * v + i]).collect();
                Tensor::new(vec![ids.len()], out)
            }
            Op::GatherToken { table, tokens, batch } => {
                let t = self.value(*table);
                let (p, c, v) = (t.shape[0], t.shape[1], t.shape[2]);
                let mut out = vec![0.0; batch * p * c];
                for b in 0..*batch {
                    for pos in 0..p {
                        let tok = tokens[b * p + pos];
                        for ch in 0..c {
                            out[(b * p + pos) * c + ch] = t.values[(pos * c + ch) * v + tok];
                        }
                    }
                }
                Tensor::new(vec![*batch, p, c], out)
            }
            Op::LogMix { x, w } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, j, k) = (tw.shape[0], tw.shape[1], tw.shape[2]);
                let outer = tx.numel() / (n * k);
                let mut out = vec![0.0; outer * n * j];
                for o in 0..outer {
                    for nn in 0..n {
                        let xrow = &tx.values[(o * n + nn) * k..(o * n + nn + 1) * k];
                        for jj in 0..j {
                            let wrow = &tw.values[(nn * j + jj) * k..(nn * j + jj + 1) * k];
                            out[(o * n + nn) * j + jj] =
                                logsumexp_slice((0..k).map(|kk| wrow[kk] + xrow[kk]));
                        }
                    }
                }
                let mut shape = tx.shape.clone();
                let last = shape.len() - 1;
                shape[last] = j;
                Tensor::new(shape, out)
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let t = self.value(*x);
                let g = &self.value(*gamma).values;
                let b = &self.value(*beta).values;
                let d = t.last_dim();
                let mut out = vec![0.0; t.numel()];
                for (r, row) in t.values.chunks(d).enumerate() {
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    for i in 0..d {
                        out[r * d + i] = (row[i] - mean) * rstd * g[i] + b[i];
                    }
                }
                Tensor::new(t.shape.clone(), out)
            }
            Op::Dropout { x, keep, mask } => {
                let t = self.value(*x);
                let inv = 1.0 / keep;
                let out = t
                    .values
                    .iter()
                    .zip(mask)
                    .map(|(&v, &m)| if m { v * inv } else { 0.0 })
                    .collect();
                Tensor::new(t.shape.clone(), out)
            }
            Op::Attention { q, k, v, allowed } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let s = &tq.shape;
                let (b, h, t, dh) = (s[0], s[1], s[2], s[3]);
                let scale = 1.0 / (dh as f64).sqrt();
                let mut out = vec![0.0; tq.numel()];
                let mut probs = vec![0.0; t];
                for bi in 0..b {
                    for hi in 0..h {
                        let base = (bi * h + hi) * t * dh;
                        for qi in 0..t {
                            let qrow = &tq.values[base + qi * dh..base + (qi + 1) * dh];
                            let mut max = f64::NEG_INFINITY;
                            for ki in 0..t {
                                probs[ki] = if allowed[qi * t + ki] {
                                    let krow = &tk.values[base + ki * dh..base + (ki + 1) * dh];
                                    let dot: f64 =
                                        qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                                    let sc = dot * scale;
                                    if sc > max {
                                        max = sc;
                                    }
                                    sc
                                } else {
                                    f64::NEG_INFINITY
                                };
                            }
                            let mut sum = 0.0;
                            for p in probs.iter_mut() {
                                *p = if p.is_finite() { (*p - max).exp() } else { 0.0 };
                                sum += *p;
                            }
                            let orow = &mut out[base + qi * dh..base + (qi + 1) * dh];
                            for ki in 0..t {
                                let w = probs[ki] / sum;
                                if w == 0.0 {
                                    continue;
                                }
                                let vrow = &tv.values[base + ki * dh..base + (ki + 1) * dh];
                                for di in 0..dh {
                                    orow[di] += w * vrow[di];
                                }
                            }
                        }
                    }
                }
                Tensor::new(s.clone(), out)
            }
            Op::SplitHeads { x, heads } => {
                let t = self.value(*x);
                let (b, tt, d) = (t.shape[0], t.shape[1], t.shape[2]);
                let dh = d / heads;
                let mut out = vec![0.0; t.numel()];
                for bi in 0..b {
                    for ti in 0..tt {
                        for hi in 0..*heads {
                            let src = (bi * tt + ti) * d + hi * dh;
                            let dst = ((bi * heads + hi) * tt + ti) * dh;
                            out[dst..dst + dh].copy_from_slice(&t.values[src..src + dh]);
                        }
                    }
                }
                Tensor::new(vec![b, *heads, tt, dh], out)
            }
            Op::MergeHeads { x, heads } => {
                let t = self.value(*x);
                let (b, h, tt, dh) = (t.shape[0], t.shape[1], t.shape[2], t.shape[3]);
                debug_assert_eq!(h, *heads);
                let d = h * dh;
                let mut out = vec![0.0; t.numel()];
                for bi in 0..b {
                    for hi in 0..h {
                        for ti in 0..tt {
                            let src = ((bi * h + hi) * tt + ti) * dh;
                            let dst = (bi * tt + ti) * d + hi * dh;
                            out[dst..dst + dh].copy_from_slice(&t.values[src..src + dh]);
                        }
                    }
                }
                Tensor::new(vec![b, tt, d], out)
            }
            Op::CrossEntropy { logits, targets } => {
                let t = self.value(*logits);
                let v = t.shape[1];
                let mut total = 0.0;
                let mut count = 0usize;
                for (r, &tg) in targets.iter().enumerate() {
                    if tg < 0 {
                        continue;
                    }
                    let row = &t.values[r * v..(r + 1) * v];
                    let lse = logsumexp_slice(row.iter().cloned());
                    total += lse - row[tg as usize];
                    count += 1;
                }
                Tensor::scalar(total / count as f64)
            }
            Op::MaskedMean { x, mask } => {
                let t = self.value(*x);
                let mut total = 0.0;
                let mut count = 0usize;
                for (v, &m) in t.values.iter().zip(mask) {
                    if m {
                        total += v;
                        count += 1;
                    }
                }
                Tensor::scalar(total / count as f64)
            }
        }
    }

    fn map(&self, a: TensorId, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape.clone(), t.values.iter().map(|&v| f(v)).collect())
    }

    fn ewise(&self, a: TensorId, b: TensorId, bc: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(ta.numel());
        match bc {
            Bcast::Same => {
                out.extend(ta.values.iter().zip(&tb.values).map(|(&x, &y)| f(x, y)));
            }
            Bcast::Scalar => {
                let y = tb.values[0];
                out.extend(ta.values.iter().map(|&x| f(x, y)));
            }
            Bcast::TrailingVec => {
                let d = ta.last_dim();
                for (i, &x) in ta.values.iter().enumerate() {
                    out.push(f(x, tb.values[i % d]));
                }
            }
            Bcast::KeepLast1 => {
                let d = ta.last_dim();
                for (i, &x) in ta.values.iter().enumerate() {
                    out.push(f(x, tb.values[i / d]));
                }
            }
        }
        Tensor::new(ta.shape.clone(), out)
    }
}

#[cfg(test)]
mod tests;
