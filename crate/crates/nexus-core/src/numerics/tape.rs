//! The op tape: eager forward execution with full recording, reverse-mode
//! backward, and a finite-difference oracle that replays the recorded graph
//! in `f64`.

use std::sync::Arc;

use crate::numerics::kernels as kn;
use crate::numerics::Scalar;
use crate::{Error, Result};

/// Leaf storage: owned activations, or parameter tensors shared across the
/// per-sample tapes of one batch without copying.
#[derive(Debug, Clone)]
enum ValueStore {
    Owned(Vec<f32>),
    Shared(Arc<Vec<f32>>),
}

impl ValueStore {
    fn as_slice(&self) -> &[f32] {
        match self {
            ValueStore::Owned(v) => v,
            ValueStore::Shared(v) => v,
        }
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorRef(pub(crate) u32);

impl TensorRef {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Primitive operations. Every variant has a defined adjoint.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f32),
    AddConst(f32),
    /// `[n,d] + [1,d]`, the second operand broadcast over rows.
    AddRow,
    Matmul,
    Transpose,
    Gelu,
    /// Domain x >= 0; the adjoint at x == 0 is defined as 0.
    Sqrt,
    /// Row-wise softmax over the last dimension.
    Softmax,
    /// `(x[n,d], gamma[1,d], beta[1,d])`, row-wise normalization.
    LayerNorm { eps: f32 },
    /// `(q,k,v)` each `[n,d]`; multi-head scaled dot-product attention.
    /// With `causal`, row i attends to columns 0..=i.
    Attention { heads: usize, causal: bool },
    /// Row gather from a `[vocab,d]` table.
    Embed { ids: Vec<u32> },
    SliceRows { start: usize, len: usize },
    ConcatRows,
    SumAll,
    MeanAll,
    /// `[n,d] -> [n,1]` row sums.
    SumRows,
    /// `logits [n,v] -> [n,1]` of `-log softmax(row)[target]`.
    CeRows { targets: Vec<u32> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::AddConst(_) => "add_const",
            Op::AddRow => "add_row",
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::Gelu => "gelu",
            Op::Sqrt => "sqrt",
            Op::Softmax => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::Embed { .. } => "embed",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatRows => "concat_rows",
            Op::SumAll => "sum_all",
            Op::MeanAll => "mean_all",
            Op::SumRows => "sum_rows",
            Op::CeRows { .. } => "ce_rows",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<TensorRef>,
    shape: Vec<usize>,
    requires_grad: bool,
    /// True when some requires_grad leaf feeds this node; backward skips the rest.
    on_grad_path: bool,
}

/// Recorded computation graph. Nodes are appended in execution order, so the
/// record is always topologically sorted.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<ValueStore>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, r: TensorRef) -> &[usize] {
        &self.nodes[r.idx()].shape
    }

    pub fn value(&self, r: TensorRef) -> &[f32] {
        self.values[r.idx()].as_slice()
    }

    pub fn requires_grad(&self, r: TensorRef) -> bool {
        self.nodes[r.idx()].requires_grad
    }

    /// Record a leaf tensor. `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f32>, requires_grad: bool) -> Result<TensorRef> {
        if numel(shape) != data.len() {
            return Err(Error::Shape {
                op: "leaf",
                detail: format!("shape {:?} vs data len {}", shape, data.len()),
            });
        }
        check_finite("leaf", &data)?;
        let r = TensorRef(self.nodes.len() as u32);
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            shape: shape.to_vec(),
            requires_grad,
            on_grad_path: requires_grad,
        });
        self.values.push(ValueStore::Owned(data));
        Ok(r)
    }

    /// Leaf backed by shared storage; parameters are checked once at
    /// construction, not per tape.
    pub fn leaf_arc(&mut self, shape: &[usize], data: Arc<Vec<f32>>, requires_grad: bool) -> Result<TensorRef> {
        if numel(shape) != data.len() {
            return Err(Error::Shape {
                op: "leaf",
                detail: format!("shape {:?} vs data len {}", shape, data.len()),
            });
        }
        let r = TensorRef(self.nodes.len() as u32);
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            shape: shape.to_vec(),
            requires_grad,
            on_grad_path: requires_grad,
        });
        self.values.push(ValueStore::Shared(data));
        Ok(r)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<TensorRef> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, v: f32) -> Result<TensorRef> {
        self.constant(&[1], vec![v])
    }

    fn push(&mut self, op: Op, inputs: Vec<TensorRef>) -> Result<TensorRef> {
        let in_shapes: Vec<&[usize]> = inputs.iter().map(|r| self.nodes[r.idx()].shape.as_slice()).collect();
        let shape = infer_shape(&op, &in_shapes)?;
        let in_values: Vec<&[f32]> = inputs.iter().map(|r| self.values[r.idx()].as_slice()).collect();
        let out = exec_op::<f32>(&op, &in_shapes, &in_values, &shape);
        check_finite(op.name(), &out)?;
        let on_grad_path = inputs.iter().any(|r| self.nodes[r.idx()].on_grad_path);
        let r = TensorRef(self.nodes.len() as u32);
        self.nodes.push(Node { op, inputs, shape, requires_grad: false, on_grad_path });
        self.values.push(ValueStore::Owned(out));
        Ok(r)
    }

    // ── op constructors ──────────────────────────────────────────────

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.push(Op::Add, vec![a, b])
    }
    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.push(Op::Sub, vec![a, b])
    }
    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.push(Op::Mul, vec![a, b])
    }
    pub fn div(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.push(Op::Div, vec![a, b])
    }
    pub fn scale(&mut self, a: TensorRef, c: f32) -> Result<TensorRef> {
        self.push(Op::Scale(c), vec![a])
    }
    pub fn add_const(&mut self, a: TensorRef, c: f32) -> Result<TensorRef> {
        self.push(Op::AddConst(c), vec![a])
    }
    pub fn add_row(&mut self, a: TensorRef, row: TensorRef) -> Result<TensorRef> {
        self.push(Op::AddRow, vec![a, row])
    }
    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.push(Op::Matmul, vec![a, b])
    }
    pub fn transpose(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.push(Op::Transpose, vec![a])
    }
    pub fn gelu(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.push(Op::Gelu, vec![a])
    }
    pub fn sqrt(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.push(Op::Sqrt, vec![a])
    }
    pub fn softmax(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.push(Op::Softmax, vec![a])
    }
    pub fn layer_norm(&mut self, x: TensorRef, gamma: TensorRef, beta: TensorRef, eps: f32) -> Result<TensorRef> {
        self.push(Op::LayerNorm { eps }, vec![x, gamma, beta])
    }
    pub fn attention(&mut self, q: TensorRef, k: TensorRef, v: TensorRef, heads: usize, causal: bool) -> Result<TensorRef> {
        self.push(Op::Attention { heads, causal }, vec![q, k, v])
    }
    pub fn embed(&mut self, table: TensorRef, ids: Vec<u32>) -> Result<TensorRef> {
        self.push(Op::Embed { ids }, vec![table])
    }
    pub fn slice_rows(&mut self, a: TensorRef, start: usize, len: usize) -> Result<TensorRef> {
        self.push(Op::SliceRows { start, len }, vec![a])
    }
    pub fn concat_rows(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        self.push(Op::ConcatRows, parts.to_vec())
    }
    pub fn sum_all(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.push(Op::SumAll, vec![a])
    }
    pub fn mean_all(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.push(Op::MeanAll, vec![a])
    }
    pub fn sum_rows(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.push(Op::SumRows, vec![a])
    }
    pub fn ce_rows(&mut self, logits: TensorRef, targets: Vec<u32>) -> Result<TensorRef> {
        self.push(Op::CeRows { targets }, vec![logits])
    }

    // ── autodiff ─────────────────────────────────────────────────────

    /// Reverse-mode pass from a scalar loss. Gradients are populated for all
    /// requires_grad leaves; leaves not on any path to the loss get zeros.
    pub fn backward(&self, loss: TensorRef) -> Result<Gradients> {
        let slices: Vec<&[f32]> = self.values.iter().map(|v| v.as_slice()).collect();
        let grads = backward_values_with::<f32>(&self.nodes, &slices, loss)?;
        Ok(Gradients { grads })
    }

    /// Recompute every node value from the leaves; bit-identical by contract.
    pub fn replay(&self) -> Vec<Vec<f32>> {
        replay_values::<f32>(&self.nodes, &self.values, None)
    }

    /// Bit-compare a replay against the recorded values.
    pub fn replay_matches(&self) -> bool {
        let replayed = self.replay();
        self.values
            .iter()
            .zip(&replayed)
            .all(|(a, b)| a.as_slice() == b.as_slice())
    }
}

impl Drop for Tape {
    fn drop(&mut self) {
        for v in self.values.drain(..) {
            if let ValueStore::Owned(v) = v {
                kn::give_buf(v);
            }
        }
    }
}

/// Gradient map produced by [`Tape::backward`], indexed by [`TensorRef`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Drop for Gradients {
    fn drop(&mut self) {
        for g in self.grads.drain(..).flatten() {
            kn::give_buf(g);
        }
    }
}

impl Gradients {
    /// Gradient for a node; `None` if the node was off the loss path.
    pub fn get(&self, r: TensorRef) -> Option<&[f32]> {
        self.grads[r.idx()].as_deref()
    }

    /// Gradient with zeros substituted for off-path tensors.
    pub fn get_or_zeros(&self, tape: &Tape, r: TensorRef) -> Vec<f32> {
        match self.get(r) {
            Some(g) => g.to_vec(),
            None => vec![0.0; numel(tape.shape(r))],
        }
    }
}

fn check_finite(op: &'static str, data: &[f32]) -> Result<()> {
    // Branch-free OR-reduction over exponent bits; vectorizes, unlike an
    // early-exit is_finite loop.
    let mut bad = 0u32;
    for &v in data {
        bad |= ((v.to_bits() & 0x7fff_ffff) >= 0x7f80_0000) as u32;
    }
    if bad == 0 {
        return Ok(());
    }
    let index = data.iter().position(|v| !v.is_finite()).unwrap_or(0);
    Err(Error::NonFinite { op, index })
}

fn infer_shape(op: &Op, ins: &[&[usize]]) -> Result<Vec<usize>> {
    let err = |detail: String| Error::Shape { op: op.name(), detail };
    let eq2 = |a: &[usize], b: &[usize]| -> Result<()> {
        if a != b {
            Err(err(format!("{a:?} vs {b:?}")))
        } else {
            Ok(())
        }
    };
    Ok(match op {
        Op::Leaf => unreachable!("leaf shapes are given"),
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            eq2(ins[0], ins[1])?;
            ins[0].to_vec()
        }
        Op::Scale(_) | Op::AddConst(_) | Op::Gelu | Op::Sqrt => ins[0].to_vec(),
        Op::AddRow => {
            let (a, b) = (ins[0], ins[1]);
            if a.len() != 2 || b != [1, a[1]] {
                return Err(err(format!("{a:?} + row {b:?}")));
            }
            a.to_vec()
        }
        Op::Matmul => {
            let (a, b) = (ins[0], ins[1]);
            if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
                return Err(err(format!("{a:?} x {b:?}")));
            }
            vec![a[0], b[1]]
        }
        Op::Transpose => {
            let a = ins[0];
            if a.len() != 2 {
                return Err(err(format!("{a:?}")));
            }
            vec![a[1], a[0]]
        }
        Op::Softmax => {
            let a = ins[0];
            if a.len() != 2 {
                return Err(err(format!("{a:?}")));
            }
            a.to_vec()
        }
        Op::LayerNorm { .. } => {
            let (x, g, b) = (ins[0], ins[1], ins[2]);
            if x.len() != 2 || g != [1, x[1]] || b != [1, x[1]] {
                return Err(err(format!("x {x:?} gamma {g:?} beta {b:?}")));
            }
            x.to_vec()
        }
        Op::Attention { heads, .. } => {
            let (q, k, v) = (ins[0], ins[1], ins[2]);
            eq2(q, k)?;
            eq2(q, v)?;
            if q.len() != 2 || *heads == 0 || q[1] % heads != 0 {
                return Err(err(format!("q {q:?} heads {heads}")));
            }
            q.to_vec()
        }
        Op::Embed { ids } => {
            let t = ins[0];
            if t.len() != 2 {
                return Err(err(format!("table {t:?}")));
            }
            if let Some(&bad) = ids.iter().find(|&&id| id as usize >= t[0]) {
                return Err(err(format!("id {bad} out of vocab {}", t[0])));
            }
            vec![ids.len(), t[1]]
        }
        Op::SliceRows { start, len } => {
            let a = ins[0];
            if a.len() != 2 || start + len > a[0] || *len == 0 {
                return Err(err(format!("rows {start}..{} of {a:?}", start + len)));
            }
            vec![*len, a[1]]
        }
        Op::ConcatRows => {
            if ins.is_empty() {
                return Err(err("no parts".into()));
            }
            let d = ins[0].last().copied().unwrap_or(0);
            let mut rows = 0;
            for s in ins {
                if s.len() != 2 || s[1] != d {
                    return Err(err(format!("part {s:?} vs width {d}")));
                }
                rows += s[0];
            }
            vec![rows, d]
        }
        Op::SumAll | Op::MeanAll => vec![1],
        Op::SumRows => {
            let a = ins[0];
            if a.len() != 2 {
                return Err(err(format!("{a:?}")));
            }
            vec![a[0], 1]
        }
        Op::CeRows { targets } => {
            let a = ins[0];
            if a.len() != 2 || targets.len() != a[0] {
                return Err(err(format!("logits {a:?} targets {}", targets.len())));
            }
            if let Some(&bad) = targets.iter().find(|&&t| t as usize >= a[1]) {
                return Err(err(format!("target {bad} out of vocab {}", a[1])));
            }
            vec![a[0], 1]
        }
    })
}

fn cast_slice<S: Scalar>(xs: &[f32]) -> Vec<S> {
    xs.iter().map(|&x| S::from_f64(x as f64)).collect()
}

/// Execute one op. Shared by eager f32 forward and f64 oracle replay.
fn exec_op<S: Scalar>(op: &Op, in_shapes: &[&[usize]], ins: &[&[S]], out_shape: &[usize]) -> Vec<S> {
    let len = numel(out_shape);
    match op {
        Op::Leaf => unreachable!("leaves are not executed"),
        Op::Add => map2(ins[0], ins[1], len, |a, b| a + b),
        Op::Sub => map2(ins[0], ins[1], len, |a, b| a - b),
        Op::Mul => map2(ins[0], ins[1], len, |a, b| a * b),
        Op::Div => map2(ins[0], ins[1], len, |a, b| a / b),
        Op::Scale(c) => {
            let c = S::from_f64(*c as f64);
            map1(ins[0], len, |a| a * c)
        }
        Op::AddConst(c) => {
            let c = S::from_f64(*c as f64);
            map1(ins[0], len, |a| a + c)
        }
        Op::AddRow => {
            let d = in_shapes[0][1];
            let mut out = kn::take_buf::<S>(len);
            out.copy_from_slice(ins[0]);
            for row in out.chunks_mut(d) {
                for (o, &b) in row.iter_mut().zip(ins[1]) {
                    *o = *o + b;
                }
            }
            out
        }
        Op::Matmul => {
            let (n, k) = (in_shapes[0][0], in_shapes[0][1]);
            let m = in_shapes[1][1];
            let mut out = kn::take_buf::<S>(n * m);
            kn::matmul_nn_acc(ins[0], ins[1], &mut out, n, k, m);
            out
        }
        Op::Transpose => {
            let (n, m) = (in_shapes[0][0], in_shapes[0][1]);
            let mut out = kn::take_buf::<S>(n * m);
            for i in 0..n {
                for j in 0..m {
                    out[j * n + i] = ins[0][i * m + j];
                }
            }
            out
        }
        Op::Gelu => map1(ins[0], len, kn::gelu),
        Op::Sqrt => map1(ins[0], len, |x| x.sqrt()),
        Op::Softmax => {
            let (n, d) = (in_shapes[0][0], in_shapes[0][1]);
            let mut out = kn::take_buf::<S>(n * d);
            kn::softmax_rows(ins[0], &mut out, n, d);
            out
        }
        Op::LayerNorm { eps } => {
            let (n, d) = (in_shapes[0][0], in_shapes[0][1]);
            let (gamma, beta) = (ins[1], ins[2]);
            let mut out = kn::take_buf::<S>(n * d);
            for i in 0..n {
                let row = &ins[0][i * d..(i + 1) * d];
                let (mean, rstd) = kn::row_moments(row, *eps as f64);
                let (mean, rstd) = (S::from_f64(mean), S::from_f64(rstd));
                let orow = &mut out[i * d..(i + 1) * d];
                for j in 0..d {
                    orow[j] = gamma[j] * ((row[j] - mean) * rstd) + beta[j];
                }
            }
            out
        }
        Op::Attention { heads, causal } => {
            attention_forward(ins[0], ins[1], ins[2], in_shapes[0][0], in_shapes[0][1], *heads, *causal)
        }
        Op::Embed { ids } => {
            let d = in_shapes[0][1];
            let mut out = kn::take_buf::<S>(len);
            for (pos, &id) in ids.iter().enumerate() {
                out[pos * d..(pos + 1) * d].copy_from_slice(&ins[0][id as usize * d..(id as usize + 1) * d]);
            }
            out
        }
        Op::SliceRows { start, len: rows } => {
            let d = in_shapes[0][1];
            let mut out = kn::take_buf::<S>(len);
            out.copy_from_slice(&ins[0][start * d..(start + rows) * d]);
            out
        }
        Op::ConcatRows => {
            let mut out = kn::take_buf::<S>(len);
            let mut offset = 0;
            for part in ins {
                out[offset..offset + part.len()].copy_from_slice(part);
                offset += part.len();
            }
            out
        }
        Op::SumAll => vec![S::from_f64(kn::sum_f64(ins[0]))],
        Op::MeanAll => vec![S::from_f64(kn::sum_f64(ins[0]) / ins[0].len() as f64)],
        Op::SumRows => {
            let (n, d) = (in_shapes[0][0], in_shapes[0][1]);
            let mut out = kn::take_buf::<S>(n);
            for i in 0..n {
                out[i] = S::from_f64(kn::sum_f64(&ins[0][i * d..(i + 1) * d]));
            }
            out
        }
        Op::CeRows { targets } => {
            let (n, v) = (in_shapes[0][0], in_shapes[0][1]);
            let mut out = kn::take_buf::<S>(n);
            for i in 0..n {
                let row = &ins[0][i * v..(i + 1) * v];
                let mut mx = row[0];
                for &x in row {
                    if x > mx {
                        mx = x;
                    }
                }
                let mut denom = 0.0f64;
                for &x in row {
                    denom += (x - mx).exp().to_f64();
                }
                let t = targets[i] as usize;
                // -log softmax = log(sum exp(x - mx)) - (x_t - mx)
                out[i] = S::from_f64(denom.ln()) - (row[t] - mx);
            }
            out
        }
    }
}

fn map1<S: Scalar>(a: &[S], len: usize, f: impl Fn(S) -> S) -> Vec<S> {
    let mut out = kn::take_buf::<S>(len);
    for (o, &x) in out.iter_mut().zip(a) {
        *o = f(x);
    }
    out
}

fn map2<S: Scalar>(a: &[S], b: &[S], len: usize, f: impl Fn(S, S) -> S) -> Vec<S> {
    let mut out = kn::take_buf::<S>(len);
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        *o = f(x, y);
    }
    out
}

/// Per-head score matrices are computed full-width with matmul kernels; the
/// limited softmax zeroes every masked probability, and `P @ V` over those
/// exact zeros adds `+0.0` terms that leave the prefix sums bit-unchanged,
/// so causal outputs match a prefix-only loop bit for bit.
fn attention_forward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    n: usize,
    d: usize,
    heads: usize,
    causal: bool,
) -> Vec<S> {
    let dh = d / heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let limit = |i: usize| if causal { i + 1 } else { n };
    let mut out = kn::take_buf::<S>(n * d);
    let mut qs = kn::take_buf::<S>(n * dh);
    let mut kht = kn::take_buf::<S>(dh * n);
    let mut vh = kn::take_buf::<S>(n * dh);
    let mut scores = kn::take_buf::<S>(n * n);
    let mut probs = kn::take_buf::<S>(n * n);
    let mut oh = kn::take_buf::<S>(n * dh);
    for h in 0..heads {
        gather_head_scaled(q, &mut qs, n, d, h, dh, scale);
        gather_head_transposed(k, &mut kht, n, d, h, dh);
        gather_head(v, &mut vh, n, d, h, dh);
        scores.fill(S::ZERO);
        kn::matmul_nn_acc(&qs, &kht, &mut scores, n, dh, n);
        kn::softmax_rows_limited(&scores, &mut probs, n, n, limit);
        oh.fill(S::ZERO);
        kn::matmul_nn_acc(&probs, &vh, &mut oh, n, n, dh);
        for i in 0..n {
            out[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&oh[i * dh..(i + 1) * dh]);
        }
    }
    for buf in [qs, kht, vh, scores, probs, oh] {
        kn::give_buf(buf);
    }
    out
}

fn gather_head<S: Scalar>(x: &[S], out: &mut [S], n: usize, d: usize, h: usize, dh: usize) {
    for i in 0..n {
        out[i * dh..(i + 1) * dh].copy_from_slice(&x[i * d + h * dh..i * d + (h + 1) * dh]);
    }
}

fn gather_head_scaled<S: Scalar>(x: &[S], out: &mut [S], n: usize, d: usize, h: usize, dh: usize, c: S) {
    for i in 0..n {
        let src = &x[i * d + h * dh..i * d + (h + 1) * dh];
        for (o, &v) in out[i * dh..(i + 1) * dh].iter_mut().zip(src) {
            *o = v * c;
        }
    }
}

/// Head slice stored transposed, `[dh, n]` row-major.
fn gather_head_transposed<S: Scalar>(x: &[S], out: &mut [S], n: usize, d: usize, h: usize, dh: usize) {
    for i in 0..n {
        let src = &x[i * d + h * dh..i * d + (h + 1) * dh];
        for (c, &v) in src.iter().enumerate() {
            out[c * n + i] = v;
        }
    }
}

fn scatter_head_add<S: Scalar>(x: &mut [S], part: &[S], n: usize, d: usize, h: usize, dh: usize) {
    for i in 0..n {
        let dst = &mut x[i * d + h * dh..i * d + (h + 1) * dh];
        for (o, &p) in dst.iter_mut().zip(&part[i * dh..(i + 1) * dh]) {
            *o = *o + p;
        }
    }
}

/// Replay all node values at scalar type `S`, optionally overriding one leaf
/// entry (used by the finite-difference oracle).
fn replay_values<S: Scalar>(
    nodes: &[Node],
    f32_values: &[ValueStore],
    override_entry: Option<(usize, usize, f64)>,
) -> Vec<Vec<S>> {
    let mut values: Vec<Vec<S>> = Vec::with_capacity(nodes.len());
    for (idx, node) in nodes.iter().enumerate() {
        let out = match node.op {
            Op::Leaf => {
                let mut v = cast_slice::<S>(f32_values[idx].as_slice());
                if let Some((leaf, entry, val)) = override_entry {
                    if leaf == idx {
                        v[entry] = S::from_f64(val);
                    }
                }
                v
            }
            _ => {
                let in_shapes: Vec<&[usize]> =
                    node.inputs.iter().map(|r| nodes[r.idx()].shape.as_slice()).collect();
                let ins: Vec<&[S]> = node.inputs.iter().map(|r| values[r.idx()].as_slice()).collect();
                exec_op::<S>(&node.op, &in_shapes, &ins, &node.shape)
            }
        };
        values.push(out);
    }
    values
}

/// Reverse pass over recorded nodes at scalar type `S`.
fn backward_values<S: Scalar>(
    nodes: &[Node],
    f32_values: &[ValueStore],
    loss: TensorRef,
) -> Result<Vec<Option<Vec<S>>>> {
    let values = replay_values::<S>(nodes, f32_values, None);
    let slices: Vec<&[S]> = values.iter().map(|v| v.as_slice()).collect();
    let out = backward_values_with(nodes, &slices, loss);
    for v in values {
        kn::give_buf(v);
    }
    out
}

fn backward_values_with<S: Scalar>(
    nodes: &[Node],
    values: &[&[S]],
    loss: TensorRef,
) -> Result<Vec<Option<Vec<S>>>> {
    let loss_node = &nodes[loss.idx()];
    if numel(&loss_node.shape) != 1 {
        return Err(Error::InvalidArgument(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss_node.shape
        )));
    }
    let mut grads: Vec<Option<Vec<S>>> = vec![None; nodes.len()];
    grads[loss.idx()] = Some(vec![S::ONE]); // d(loss)/d(loss) = 1
    for idx in (0..=loss.idx()).rev() {
        let node = &nodes[idx];
        if !node.on_grad_path {
            grads[idx] = None;
            continue;
        }
        let Some(go) = grads[idx].take() else { continue };
        if matches!(node.op, Op::Leaf) {
            grads[idx] = Some(go);
            continue;
        }
        let in_shapes: Vec<&[usize]> =
            node.inputs.iter().map(|r| nodes[r.idx()].shape.as_slice()).collect();
        let ins: Vec<&[S]> = node.inputs.iter().map(|r| values[r.idx()]).collect();
        let input_grads = adjoint::<S>(&node.op, &in_shapes, &ins, values[idx], &go, &node.shape);
        for (r, g) in node.inputs.iter().zip(input_grads) {
            if !nodes[r.idx()].on_grad_path {
                kn::give_buf(g);
                continue;
            }
            match &mut grads[r.idx()] {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a = *a + *b;
                    }
                    kn::give_buf(g);
                }
                slot => *slot = Some(g),
            }
        }
        grads[idx] = Some(go);
    }
    // Leaves that require grad but never receive one get zeros.
    for (idx, node) in nodes.iter().enumerate() {
        if node.requires_grad && grads[idx].is_none() {
            grads[idx] = Some(vec![S::ZERO; numel(&node.shape)]);
        }
    }
    Ok(grads)
}

/// Vector-Jacobian products for each op.
fn adjoint<S: Scalar>(
    op: &Op,
    in_shapes: &[&[usize]],
    ins: &[&[S]],
    out_val: &[S],
    go: &[S],
    out_shape: &[usize],
) -> Vec<Vec<S>> {
    match op {
        Op::Leaf => vec![],
        Op::Add => vec![copy_of(go), copy_of(go)],
        Op::Sub => vec![copy_of(go), map1(go, go.len(), |g| -g)],
        Op::Mul => vec![
            map2(go, ins[1], go.len(), |g, b| g * b),
            map2(go, ins[0], go.len(), |g, a| g * a),
        ],
        Op::Div => {
            let da = map2(go, ins[1], go.len(), |g, b| g / b);
            let mut db = kn::take_buf::<S>(go.len());
            for (o, ((&g, &a), &b)) in db.iter_mut().zip(go.iter().zip(ins[0]).zip(ins[1])) {
                *o = -g * a / (b * b);
            }
            vec![da, db]
        }
        Op::Scale(c) => {
            let c = S::from_f64(*c as f64);
            vec![map1(go, go.len(), |g| g * c)]
        }
        Op::AddConst(_) => vec![copy_of(go)],
        Op::AddRow => {
            let d = in_shapes[0][1];
            let mut drow = kn::take_buf::<S>(d);
            for row in go.chunks(d) {
                for (o, &g) in drow.iter_mut().zip(row) {
                    *o = *o + g;
                }
            }
            vec![copy_of(go), drow]
        }
        Op::Matmul => {
            let (n, k) = (in_shapes[0][0], in_shapes[0][1]);
            let m = in_shapes[1][1];
            // dA = dO B^T via an explicit transpose (keeps the fast nn kernel),
            // dB = A^T dO as ordered rank-1 updates.
            let mut bt = kn::take_buf::<S>(k * m);
            for r in 0..k {
                for c in 0..m {
                    bt[c * k + r] = ins[1][r * m + c];
                }
            }
            let mut da = kn::take_buf::<S>(n * k);
            kn::matmul_nn_acc(go, &bt, &mut da, n, m, k);
            kn::give_buf(bt);
            let mut db = kn::take_buf::<S>(k * m);
            kn::matmul_tn_acc(ins[0], go, &mut db, n, k, m);
            vec![da, db]
        }
        Op::Transpose => {
            let (n, m) = (out_shape[0], out_shape[1]);
            let mut g = kn::take_buf::<S>(n * m);
            for i in 0..n {
                for j in 0..m {
                    g[j * n + i] = go[i * m + j];
                }
            }
            vec![g]
        }
        Op::Gelu => vec![map2(go, ins[0], go.len(), |g, x| g * kn::gelu_grad(x))],
        Op::Sqrt => {
            let half = S::from_f64(0.5);
            vec![map2(go, out_val, go.len(), |g, y| {
                if y == S::ZERO {
                    S::ZERO
                } else {
                    half * g / y
                }
            })]
        }
        Op::Softmax => {
            let (n, d) = (in_shapes[0][0], in_shapes[0][1]);
            let mut dx = kn::take_buf::<S>(n * d);
            for i in 0..n {
                let y = &out_val[i * d..(i + 1) * d];
                let g = &go[i * d..(i + 1) * d];
                let mut inner = 0.0f64;
                for (yv, gv) in y.iter().zip(g) {
                    inner += (*yv * *gv).to_f64();
                }
                let inner = S::from_f64(inner);
                let row = &mut dx[i * d..(i + 1) * d];
                for j in 0..d {
                    row[j] = y[j] * (g[j] - inner);
                }
            }
            vec![dx]
        }
        Op::LayerNorm { eps } => {
            let (n, d) = (in_shapes[0][0], in_shapes[0][1]);
            let gamma = ins[1];
            let mut dx = kn::take_buf::<S>(n * d);
            let mut dgamma = kn::take_buf::<S>(d);
            let mut dbeta = kn::take_buf::<S>(d);
            for i in 0..n {
                let x = &ins[0][i * d..(i + 1) * d];
                let g = &go[i * d..(i + 1) * d];
                let (mean, rstd) = kn::row_moments(x, *eps as f64);
                let (mean_s, rstd_s) = (S::from_f64(mean), S::from_f64(rstd));
                let mut m1 = 0.0f64;
                let mut m2 = 0.0f64;
                let mut xh = vec![S::ZERO; d];
                let mut a = vec![S::ZERO; d];
                for j in 0..d {
                    xh[j] = (x[j] - mean_s) * rstd_s;
                    a[j] = g[j] * gamma[j];
                    m1 += a[j].to_f64();
                    m2 += (a[j] * xh[j]).to_f64();
                }
                let m1 = S::from_f64(m1 / d as f64);
                let m2 = S::from_f64(m2 / d as f64);
                let row = &mut dx[i * d..(i + 1) * d];
                for j in 0..d {
                    row[j] = rstd_s * (a[j] - m1 - xh[j] * m2);
                    dgamma[j] = dgamma[j] + g[j] * xh[j];
                    dbeta[j] = dbeta[j] + g[j];
                }
            }
            vec![dx, dgamma, dbeta]
        }
        Op::Attention { heads, causal } => {
            attention_backward(ins[0], ins[1], ins[2], go, in_shapes[0][0], in_shapes[0][1], *heads, *causal)
        }
        Op::Embed { ids } => {
            let (vsz, d) = (in_shapes[0][0], in_shapes[0][1]);
            let mut dt = kn::take_buf::<S>(vsz * d);
            for (pos, &id) in ids.iter().enumerate() {
                let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                for (o, &g) in dst.iter_mut().zip(&go[pos * d..(pos + 1) * d]) {
                    *o = *o + g;
                }
            }
            vec![dt]
        }
        Op::SliceRows { start, len } => {
            let (n, d) = (in_shapes[0][0], in_shapes[0][1]);
            let mut g = kn::take_buf::<S>(n * d);
            g[start * d..(start + len) * d].copy_from_slice(go);
            vec![g]
        }
        Op::ConcatRows => {
            let mut offset = 0;
            let mut out = Vec::with_capacity(ins.len());
            for s in in_shapes {
                let cnt = s[0] * s[1];
                let mut part = kn::take_buf::<S>(cnt);
                part.copy_from_slice(&go[offset..offset + cnt]);
                out.push(part);
                offset += cnt;
            }
            out
        }
        Op::SumAll => {
            let mut g = kn::take_buf::<S>(ins[0].len());
            g.fill(go[0]);
            vec![g]
        }
        Op::MeanAll => {
            let c = go[0] * S::from_f64(1.0 / ins[0].len() as f64);
            let mut g = kn::take_buf::<S>(ins[0].len());
            g.fill(c);
            vec![g]
        }
        Op::SumRows => {
            let (n, d) = (in_shapes[0][0], in_shapes[0][1]);
            let mut g = kn::take_buf::<S>(n * d);
            for i in 0..n {
                let gi = go[i];
                for v in g[i * d..(i + 1) * d].iter_mut() {
                    *v = gi;
                }
            }
            vec![g]
        }
        Op::CeRows { targets } => {
            let (n, v) = (in_shapes[0][0], in_shapes[0][1]);
            let mut dl = kn::take_buf::<S>(n * v);
            let mut probs = kn::take_buf::<S>(n * v);
            kn::softmax_rows(ins[0], &mut probs, n, v);
            for i in 0..n {
                let gi = go[i];
                let row = &mut dl[i * v..(i + 1) * v];
                for j in 0..v {
                    row[j] = probs[i * v + j] * gi;
                }
                let t = targets[i] as usize;
                row[t] = row[t] - gi;
            }
            kn::give_buf(probs);
            vec![dl]
        }
    }
}

fn copy_of<S: Scalar>(src: &[S]) -> Vec<S> {
    let mut out = kn::take_buf::<S>(src.len());
    out.copy_from_slice(src);
    out
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    go: &[S],
    n: usize,
    d: usize,
    heads: usize,
    causal: bool,
) -> Vec<Vec<S>> {
    let dh = d / heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let limit = |i: usize| if causal { i + 1 } else { n };
    let mut dq = kn::take_buf::<S>(n * d);
    let mut dk = kn::take_buf::<S>(n * d);
    let mut dv = kn::take_buf::<S>(n * d);
    let mut qh = kn::take_buf::<S>(n * dh);
    let mut qs = kn::take_buf::<S>(n * dh);
    let mut kh = kn::take_buf::<S>(n * dh);
    let mut kht = kn::take_buf::<S>(dh * n);
    let mut vh = kn::take_buf::<S>(n * dh);
    let mut vht = kn::take_buf::<S>(dh * n);
    let mut goh = kn::take_buf::<S>(n * dh);
    let mut scores = kn::take_buf::<S>(n * n);
    let mut probs = kn::take_buf::<S>(n * n);
    let mut dp = kn::take_buf::<S>(n * n);
    let mut dqh = kn::take_buf::<S>(n * dh);
    let mut dkh = kn::take_buf::<S>(n * dh);
    let mut dvh = kn::take_buf::<S>(n * dh);
    for h in 0..heads {
        gather_head(q, &mut qh, n, d, h, dh);
        gather_head_scaled(q, &mut qs, n, d, h, dh, scale);
        gather_head(k, &mut kh, n, d, h, dh);
        gather_head_transposed(k, &mut kht, n, d, h, dh);
        gather_head(v, &mut vh, n, d, h, dh);
        gather_head_transposed(v, &mut vht, n, d, h, dh);
        gather_head(go, &mut goh, n, d, h, dh);
        // Recompute the probabilities (cheaper than storing them per node).
        scores.fill(S::ZERO);
        kn::matmul_nn_acc(&qs, &kht, &mut scores, n, dh, n);
        kn::softmax_rows_limited(&scores, &mut probs, n, n, limit);
        // dP = dO V^T; dS = scale * Per (dP - rowsum(dP per P));
        // masked entries have P == 0, so dS vanishes there exactly.
        dp.fill(S::ZERO);
        kn::matmul_nn_acc(&goh, &vht, &mut dp, n, dh, n);
        for i in 0..n {
            let prow = &probs[i * n..(i + 1) * n];
            let dprow = &mut dp[i * n..(i + 1) * n];
            let mut inner = 0.0f64;
            for (dpv, &pv) in dprow.iter().zip(prow) {
                inner += (*dpv * pv).to_f64();
            }
            let inner = S::from_f64(inner);
            for (dpv, &pv) in dprow.iter_mut().zip(prow) {
                *dpv = scale * pv * (*dpv - inner);
            }
        }
        let ds = &dp;
        dqh.fill(S::ZERO);
        kn::matmul_nn_acc(ds, &kh, &mut dqh, n, n, dh);
        dkh.fill(S::ZERO);
        kn::matmul_tn_acc(ds, &qh, &mut dkh, n, n, dh);
        dvh.fill(S::ZERO);
        kn::matmul_tn_acc(&probs, &goh, &mut dvh, n, n, dh);
        scatter_head_add(&mut dq, &dqh, n, d, h, dh);
        scatter_head_add(&mut dk, &dkh, n, d, h, dh);
        scatter_head_add(&mut dv, &dvh, n, d, h, dh);
    }
    for buf in [qh, qs, kh, kht, vh, vht, goh, scores, probs, dp, dqh, dkh, dvh] {
        kn::give_buf(buf);
    }
    vec![dq, dk, dv]
}

/// Central-difference gradient oracle.
///
/// Replays the recorded graph end-to-end in `f64` — both the adjoint pass and
/// every perturbed forward — and returns the maximum over all entries of the
/// given parameter leaves of `|g_ad - g_fd| / max(|g_fd|, 1e-8)`. Running the
/// oracle at higher precision isolates adjoint-formula errors from `f32`
/// rounding noise.
pub fn finite_diff_check(tape: &Tape, loss: TensorRef, params: &[TensorRef], epsilon: f64) -> Result<f64> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    if numel(tape.shape(loss)) != 1 {
        return Err(Error::InvalidArgument("finite_diff_check needs a scalar loss".into()));
    }
    let grads = backward_values::<f64>(&tape.nodes, &tape.values, loss)?;
    let mut max_rel = 0.0f64;
    for &p in params {
        let pi = p.idx();
        if !matches!(tape.nodes[pi].op, Op::Leaf) {
            return Err(Error::InvalidArgument("finite_diff_check params must be leaves".into()));
        }
        let g_ad = grads[pi].as_deref().unwrap_or(&[]);
        let base = tape.values[pi].as_slice();
        for entry in 0..base.len() {
            let x = base[entry] as f64;
            let lp = replay_loss_f64(tape, loss, (pi, entry, x + epsilon))?;
            let lm = replay_loss_f64(tape, loss, (pi, entry, x - epsilon))?;
            let g_fd = (lp - lm) / (2.0 * epsilon);
            let g_a = g_ad.get(entry).copied().unwrap_or(0.0);
            let rel = (g_a - g_fd).abs() / g_fd.abs().max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

fn replay_loss_f64(tape: &Tape, loss: TensorRef, over: (usize, usize, f64)) -> Result<f64> {
    let mut values = replay_values::<f64>(&tape.nodes, &tape.values, Some(over));
    let l = values[loss.idx()][0];
    for v in values.drain(..) {
        kn::give_buf(v);
    }
    if !l.is_finite() {
        return Err(Error::NonFinite { op: "finite_diff_check", index: over.1 });
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn randn(rng: &mut RngStream, n: usize) -> Vec<f32> {
        let mut v = vec![0.0; n];
        rng.fill_normal(&mut v);
        v
    }

    #[test]
    fn quadratic_gradient_exact() {
        // loss = sum(w * w), w = [1,2,3] -> grad [2,4,6]
        let mut t = Tape::new();
        let w = t.leaf(&[1, 3], vec![1.0, 2.0, 3.0], true).unwrap();
        let sq = t.mul(w, w).unwrap();
        let loss = t.sum_all(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap(), &[2.0, 4.0, 6.0]);
        assert_eq!(g.get(loss).unwrap(), &[1.0]);
    }

    #[test]
    fn softmax_mean_gradient_vanishes() {
        // mean(softmax(z)) is constant 1/d, so grad z ~ 0.
        let mut t = Tape::new();
        let z = t.leaf(&[2, 4], vec![0.3, -1.0, 2.0, 0.0, 4.0, 4.0, -2.0, 0.5], true).unwrap();
        let s = t.softmax(z).unwrap();
        let loss = t.mean_all(s).unwrap();
        let g = t.backward(loss).unwrap();
        for &v in g.get(z).unwrap() {
            assert!(v.abs() < 1e-6, "residual grad {v}");
        }
    }

    #[test]
    fn linear_loss_fd_error_is_rounding_level() {
        let mut t = Tape::new();
        let w = t.leaf(&[1, 4], vec![0.5, -1.0, 2.0, 0.25], true).unwrap();
        let x = t.constant(&[4, 1], vec![1.0, 2.0, -0.5, 3.0]).unwrap();
        let y = t.matmul(w, x).unwrap();
        let loss = t.sum_all(y).unwrap();
        let err = finite_diff_check(&t, loss, &[w], 1e-3).unwrap();
        assert!(err < 1e-6, "affine fd error {err}");
    }

    #[test]
    fn two_layer_mlp_fd_check() {
        // Fixed seed-42 inputs, eps = 1e-3, tolerance 1e-4.
        let mut rng = RngStream::new(42);
        let mut t = Tape::new();
        let x = t.constant(&[3, 4], randn(&mut rng, 12)).unwrap();
        let w1 = t.leaf(&[4, 8], randn(&mut rng, 32), true).unwrap();
        let b1 = t.leaf(&[1, 8], randn(&mut rng, 8), true).unwrap();
        let w2 = t.leaf(&[8, 2], randn(&mut rng, 16), true).unwrap();
        let b2 = t.leaf(&[1, 2], randn(&mut rng, 2), true).unwrap();
        let h = t.matmul(x, w1).unwrap();
        let h = t.add_row(h, b1).unwrap();
        let h = t.gelu(h).unwrap();
        let o = t.matmul(h, w2).unwrap();
        let o = t.add_row(o, b2).unwrap();
        let sq = t.mul(o, o).unwrap();
        let loss = t.mean_all(sq).unwrap();
        let err = finite_diff_check(&t, loss, &[w1, b1, w2, b2], 1e-3).unwrap();
        assert!(err < 1e-4, "mlp fd error {err}");
    }

    #[test]
    fn off_path_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(&[1, 2], vec![1.0, 2.0], true).unwrap();
        let unused = t.leaf(&[1, 2], vec![5.0, 6.0], true).unwrap();
        let sq = t.mul(w, w).unwrap();
        let loss = t.sum_all(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let w = t.leaf(&[1, 2], vec![1.0, 2.0], true).unwrap();
        let y = t.mul(w, w).unwrap();
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut t = Tape::new();
        let a = t.leaf(&[1, 1], vec![-1.0], false).unwrap();
        assert!(matches!(t.sqrt(a), Err(Error::NonFinite { .. })));
        let b = t.leaf(&[1, 1], vec![3.0e38], false).unwrap();
        assert!(t.add(b, b).is_err());
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut rng = RngStream::new(11);
        let mut t = Tape::new();
        let x = t.leaf(&[5, 6], randn(&mut rng, 30), true).unwrap();
        let w = t.leaf(&[6, 6], randn(&mut rng, 36), true).unwrap();
        let g = t.leaf(&[1, 6], vec![1.0; 6], true).unwrap();
        let b = t.leaf(&[1, 6], vec![0.0; 6], true).unwrap();
        let h = t.matmul(x, w).unwrap();
        let h = t.layer_norm(h, g, b, 1e-5).unwrap();
        let h = t.attention(h, h, h, 2, true).unwrap();
        let h = t.gelu(h).unwrap();
        let _loss = t.mean_all(h).unwrap();
        assert!(t.replay_matches(), "replay diverged");
    }

    #[test]
    fn causal_attention_prefix_unchanged_by_suffix_edits() {
        let mut rng = RngStream::new(3);
        let n = 6;
        let d = 8;
        let base = randn(&mut rng, n * d);
        let run = |data: &[f32]| {
            let mut t = Tape::new();
            let x = t.leaf(&[n, d], data.to_vec(), false).unwrap();
            let o = t.attention(x, x, x, 2, true).unwrap();
            t.value(o).to_vec()
        };
        let a = run(&base);
        let mut edited = base.clone();
        for v in edited[3 * d..].iter_mut() {
            *v += 7.5;
        }
        let b = run(&edited);
        assert_eq!(a[..3 * d], b[..3 * d], "prefix rows changed");
        assert_ne!(a[3 * d..], b[3 * d..]);
    }

    /// Per-primitive finite-difference sweep: 100 randomized trials spread
    /// over every differentiable op, tolerance 1e-4.
    #[test]
    fn every_primitive_passes_fd_check() {
        let mut worst = 0.0f64;
        for trial in 0..100 {
            let mut rng = RngStream::new(1000 + trial);
            let op_kind = trial % 14;
            let mut t = Tape::new();
            let err = match op_kind {
                0 => {
                    let a = t.leaf(&[3, 4], randn(&mut rng, 12), true).unwrap();
                    let b = t.leaf(&[3, 4], randn(&mut rng, 12), true).unwrap();
                    let y = t.add(a, b).unwrap();
                    let sq = t.mul(y, y).unwrap();
                    let l = t.mean_all(sq).unwrap();
                    finite_diff_check(&t, l, &[a, b], 1e-4).unwrap()
                }
                1 => {
                    let a = t.leaf(&[3, 4], randn(&mut rng, 12), true).unwrap();
                    let b = t.leaf(&[3, 4], randn(&mut rng, 12), true).unwrap();
                    let y = t.sub(a, b).unwrap();
                    let sq = t.mul(y, y).unwrap();
                    let l = t.mean_all(sq).unwrap();
                    finite_diff_check(&t, l, &[a, b], 1e-4).unwrap()
                }
                2 => {
                    let a = t.leaf(&[3, 4], randn(&mut rng, 12), true).unwrap();
                    let b = t.leaf(&[3, 4], randn(&mut rng, 12), true).unwrap();
                    let y = t.mul(a, b).unwrap();
                    let l = t.mean_all(y).unwrap();
                    finite_diff_check(&t, l, &[a, b], 1e-4).unwrap()
                }
                3 => {
                    let a = t.leaf(&[3, 4], randn(&mut rng, 12), true).unwrap();
                    let mut denom = randn(&mut rng, 12);
                    for v in denom.iter_mut() {
                        *v = 1.5 + v.abs(); // keep away from zero
                    }
                    let b = t.leaf(&[3, 4], denom, true).unwrap();
                    let y = t.div(a, b).unwrap();
                    let l = t.mean_all(y).unwrap();
                    finite_diff_check(&t, l, &[a, b], 1e-4).unwrap()
                }
                4 => {
                    let a = t.leaf(&[2, 5], randn(&mut rng, 10), true).unwrap();
                    let b = t.leaf(&[5, 3], randn(&mut rng, 15), true).unwrap();
                    let y = t.matmul(a, b).unwrap();
                    let sq = t.mul(y, y).unwrap();
                    let l = t.mean_all(sq).unwrap();
                    finite_diff_check(&t, l, &[a, b], 1e-4).unwrap()
                }
                5 => {
                    let a = t.leaf(&[3, 4], randn(&mut rng, 12), true).unwrap();
                    let y = t.transpose(a).unwrap();
                    let c = t.constant(&[4, 3], randn(&mut rng, 12)).unwrap();
                    let y = t.mul(y, c).unwrap();
                    let l = t.mean_all(y).unwrap();
                    finite_diff_check(&t, l, &[a], 1e-4).unwrap()
                }
                6 => {
                    let a = t.leaf(&[3, 4], randn(&mut rng, 12), true).unwrap();
                    let y = t.gelu(a).unwrap();
                    let l = t.mean_all(y).unwrap();
                    finite_diff_check(&t, l, &[a], 1e-4).unwrap()
                }
                7 => {
                    let mut pos = randn(&mut rng, 12);
                    for v in pos.iter_mut() {
                        *v = 0.5 + v.abs();
                    }
                    let a = t.leaf(&[3, 4], pos, true).unwrap();
                    let y = t.sqrt(a).unwrap();
                    let l = t.mean_all(y).unwrap();
                    finite_diff_check(&t, l, &[a], 1e-4).unwrap()
                }
                8 => {
                    let a = t.leaf(&[3, 5], randn(&mut rng, 15), true).unwrap();
                    let y = t.softmax(a).unwrap();
                    let c = t.constant(&[3, 5], randn(&mut rng, 15)).unwrap();
                    let y = t.mul(y, c).unwrap();
                    let l = t.mean_all(y).unwrap();
                    finite_diff_check(&t, l, &[a], 1e-4).unwrap()
                }
                9 => {
                    let x = t.leaf(&[3, 6], randn(&mut rng, 18), true).unwrap();
                    let g = t.leaf(&[1, 6], randn(&mut rng, 6), true).unwrap();
                    let b = t.leaf(&[1, 6], randn(&mut rng, 6), true).unwrap();
                    let y = t.layer_norm(x, g, b, 1e-5).unwrap();
                    let c = t.constant(&[3, 6], randn(&mut rng, 18)).unwrap();
                    let y = t.mul(y, c).unwrap();
                    let l = t.mean_all(y).unwrap();
                    finite_diff_check(&t, l, &[x, g, b], 1e-4).unwrap()
                }
                10 => {
                    let causal = trial % 2 == 0;
                    let q = t.leaf(&[4, 6], randn(&mut rng, 24), true).unwrap();
                    let k = t.leaf(&[4, 6], randn(&mut rng, 24), true).unwrap();
                    let v = t.leaf(&[4, 6], randn(&mut rng, 24), true).unwrap();
                    let y = t.attention(q, k, v, 2, causal).unwrap();
                    let c = t.constant(&[4, 6], randn(&mut rng, 24)).unwrap();
                    let y = t.mul(y, c).unwrap();
                    let l = t.mean_all(y).unwrap();
                    finite_diff_check(&t, l, &[q, k, v], 1e-4).unwrap()
                }
                11 => {
                    let table = t.leaf(&[5, 3], randn(&mut rng, 15), true).unwrap();
                    let y = t.embed(table, vec![0, 2, 2, 4]).unwrap();
                    let c = t.constant(&[4, 3], randn(&mut rng, 12)).unwrap();
                    let y = t.mul(y, c).unwrap();
                    let l = t.mean_all(y).unwrap();
                    finite_diff_check(&t, l, &[table], 1e-4).unwrap()
                }
                12 => {
                    let a = t.leaf(&[4, 3], randn(&mut rng, 12), true).unwrap();
                    let top = t.slice_rows(a, 0, 2).unwrap();
                    let bot = t.slice_rows(a, 2, 2).unwrap();
                    let y = t.concat_rows(&[bot, top]).unwrap();
                    let r = t.sum_rows(y).unwrap();
                    let sq = t.mul(r, r).unwrap();
                    let l = t.mean_all(sq).unwrap();
                    finite_diff_check(&t, l, &[a], 1e-4).unwrap()
                }
                _ => {
                    let logits = t.leaf(&[3, 5], randn(&mut rng, 15), true).unwrap();
                    let y = t.ce_rows(logits, vec![1, 0, 4]).unwrap();
                    let l = t.mean_all(y).unwrap();
                    finite_diff_check(&t, l, &[logits], 1e-4).unwrap()
                }
            };
            assert!(err < 1e-4, "trial {trial} (op {op_kind}) fd error {err}");
            worst = worst.max(err);
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn forward_ops_finite_on_bounded_inputs() {
        // Inputs within +-1e3 through every forward op (sqrt/div on their
        // documented domains) never produce NaN/Inf.
        let mut rng = RngStream::new(77);
        for _ in 0..20 {
            let mut big = vec![0.0f32; 12];
            for v in big.iter_mut() {
                *v = (rng.uniform() * 2.0 - 1.0) * 1e3;
            }
            let mut t = Tape::new();
            let a = t.leaf(&[3, 4], big.clone(), false).unwrap();
            let b = t.leaf(&[3, 4], big.iter().rev().copied().collect(), false).unwrap();
            t.add(a, b).unwrap();
            t.sub(a, b).unwrap();
            t.mul(a, b).unwrap();
            t.gelu(a).unwrap();
            t.softmax(a).unwrap();
            let g = t.constant(&[1, 4], vec![1.0; 4]).unwrap();
            let z = t.constant(&[1, 4], vec![0.0; 4]).unwrap();
            t.layer_norm(a, g, z, 1e-5).unwrap();
            t.attention(a, a, b, 2, true).unwrap();
            let bt = t.transpose(b).unwrap();
            t.matmul(a, bt).unwrap();
            let pos = t.leaf(&[3, 4], big.iter().map(|v| v.abs()).collect(), false).unwrap();
            t.sqrt(pos).unwrap();
            let denom = t.add_const(pos, 1.0).unwrap();
            t.div(a, denom).unwrap();
            t.ce_rows(a, vec![0, 1, 2]).unwrap();
        }
    }
}
