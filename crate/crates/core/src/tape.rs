//! Explicit per-pass operation tape with reverse-mode differentiation.
//!
//! Every operation appends its output to the tape, so the record is in
//! topological order by construction. `backward` walks the record once in
//! reverse. A tape built with [`Tape::inference`] stores values only and is
//! the forward-only path used by the decoder.

use crate::tensor::{
    self, expect_rank, log_softmax_row, matmul_acc, matmul_nt_acc, matmul_tn_acc, same_shape,
    sigmoid, softmax_row, Result, Scalar, Tensor, TensorError,
};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Slot<'a> {
    Borrowed(&'a Tensor),
    Owned(Tensor),
}

impl Slot<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Slot::Borrowed(t) => t,
            Slot::Owned(t) => t,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, Scalar),
    Tanh(Var),
    Sigmoid(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    Stack(Vec<Var>),
    BatchScores { context: Var, query: Var },
    BatchMix { weights: Var, context: Var },
    SelectRows { mask: Vec<bool>, on: Var, off: Var },
    Sum(Var),
    Nll { logprobs: Var, targets: Vec<usize>, pad: usize },
    Reshape(Var),
}

struct Node<'a> {
    value: Slot<'a>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed operations for one forward pass.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    record: bool,
    grads: Vec<Option<Vec<Scalar>>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a shape around `axis` into (outer, dim, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut [Scalar], src: &[Scalar]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'a> Tape<'a> {
    /// A recording tape: operations on grad-requiring inputs keep their
    /// backward rule.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            record: true,
            grads: Vec::new(),
        }
    }

    /// A value-only tape; nothing is differentiable.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            record: false,
            grads: Vec::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[Scalar]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<Scalar>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    fn push(&mut self, value: Slot<'a>, requires_grad: bool, op: Op) -> Var {
        let (requires_grad, op) = if self.record && requires_grad {
            (true, op)
        } else {
            (false, Op::Leaf)
        };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: Slot<'a>) -> Var {
        let rg = self.record && value.get().requires_grad;
        self.nodes.push(Node {
            value,
            requires_grad: rg,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a borrowed tensor (typically a parameter) as a leaf.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push_leaf(Slot::Borrowed(t))
    }

    /// Records an owned tensor as a leaf; it is differentiable iff
    /// `t.requires_grad`.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_leaf(Slot::Owned(t))
    }

    /// Records an owned tensor that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.push_leaf(Slot::Owned(t))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn out(&mut self, shape: &[usize], data: Vec<Scalar>, inputs: &[Var], op: Op) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(inputs);
        Ok(self.push(Slot::Owned(t), rg, op))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_rank("matmul", ta, 2)?;
        expect_rank("matmul", tb, 2)?;
        let (m, k, k2, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut data, m, k, n);
        self.out(&[m, n], data, &[a, b], Op::MatMul(a, b))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_rank("matmul_nt", ta, 2)?;
        expect_rank("matmul_nt", tb, 2)?;
        let (m, k, n, k2) = (ta.shape()[0], ta.shape()[1], tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; m * n];
        matmul_nt_acc(ta.data(), tb.data(), &mut data, m, k, n);
        self.out(&[m, n], data, &[a, b], Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        self.out(&shape, data, &[a, b], Op::Add(a, b))
    }

    /// Adds a `[n]` bias to every row of `x: [m,n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        expect_rank("add_bias", tx, 2)?;
        if tb.numel() != tx.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let n = tb.numel();
        let bd = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % n])
            .collect();
        let shape = tx.shape().to_vec();
        self.out(&shape, data, &[x, bias], Op::AddBias(x, bias))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        self.out(&shape, data, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: Scalar) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * s).collect();
        let shape = tx.shape().to_vec();
        self.out(&shape, data, &[x], Op::Scale(x, s))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v.tanh()).collect();
        let shape = tx.shape().to_vec();
        self.out(&shape, data, &[x], Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| sigmoid(v)).collect();
        let shape = tx.shape().to_vec();
        self.out(&shape, data, &[x], Op::Sigmoid(x))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| TensorError::InvalidShape {
            shape: vec![],
            reason: "concat of zero tensors".into(),
        })?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidShape {
                shape: base,
                reason: format!("concat axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.out(
            &shape,
            data,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape_in = tx.shape().to_vec();
        if axis >= shape_in.len() || len == 0 || start + len > shape_in[axis] {
            return Err(TensorError::InvalidShape {
                shape: shape_in,
                reason: format!("slice {start}..{} on axis {axis}", start + len),
            });
        }
        let (outer, dim, inner) = split_axis(&shape_in, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let mut shape = shape_in;
        shape[axis] = len;
        self.out(&shape, data, &[x], Op::Slice { input: x, axis, start })
    }

    /// Gathers rows of a `[rows, d]` table: output `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        expect_rank("gather_rows", t, 2)?;
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    bound: rows,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        self.out(
            &[ids.len(), d],
            data,
            &[table],
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Row-wise softmax of a 2-D tensor. `mask` (row-major, same size as
    /// `x`) marks positions that take part; the rest come out exactly 0.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        expect_rank("softmax_rows", tx, 2)?;
        let (m, n) = (tx.shape()[0], tx.shape()[1]);
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_rows",
                    left: vec![m, n],
                    right: vec![mk.len()],
                });
            }
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let keep = mask.map(|mk| &mk[i * n..(i + 1) * n]);
            if !softmax_row(tx.row(i), keep, &mut data[i * n..(i + 1) * n]) {
                return Err(TensorError::FullyMasked { row: i });
            }
        }
        self.out(&[m, n], data, &[x], Op::Softmax(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        expect_rank("log_softmax_rows", tx, 2)?;
        let (m, n) = (tx.shape()[0], tx.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            log_softmax_row(tx.row(i), &mut data[i * n..(i + 1) * n]);
        }
        self.out(&[m, n], data, &[x], Op::LogSoftmax(x))
    }

    /// Stacks `T` tensors of shape `[B,H]` into `[B,T,H]`.
    pub fn stack_time(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| TensorError::InvalidShape {
            shape: vec![],
            reason: "stack of zero tensors".into(),
        })?;
        let base = self.value(*first).shape().to_vec();
        if base.len() != 2 {
            return Err(TensorError::InvalidShape {
                shape: base,
                reason: "stack_time expects rank-2 inputs".into(),
            });
        }
        for &v in inputs {
            if self.value(v).shape() != base.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_time",
                    left: base,
                    right: self.value(v).shape().to_vec(),
                });
            }
        }
        let (b, h, t) = (base[0], base[1], inputs.len());
        let mut data = vec![0.0; b * t * h];
        for (ti, &v) in inputs.iter().enumerate() {
            let tv = self.value(v);
            for bi in 0..b {
                data[(bi * t + ti) * h..(bi * t + ti + 1) * h].copy_from_slice(tv.row(bi));
            }
        }
        self.out(&[b, t, h], data, inputs, Op::Stack(inputs.to_vec()))
    }

    /// `out[b,s] = Σ_h context[b,s,h] · query[b,h]`.
    pub fn batch_scores(&mut self, context: Var, query: Var) -> Result<Var> {
        let (tc, tq) = (self.value(context), self.value(query));
        expect_rank("batch_scores", tc, 3)?;
        expect_rank("batch_scores", tq, 2)?;
        let (b, s, h) = (tc.shape()[0], tc.shape()[1], tc.shape()[2]);
        if tq.shape() != [b, h] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_scores",
                left: tc.shape().to_vec(),
                right: tq.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; b * s];
        for bi in 0..b {
            let q = tq.row(bi);
            for si in 0..s {
                let c = &tc.data()[(bi * s + si) * h..(bi * s + si + 1) * h];
                let mut acc = 0.0;
                for (&x, &y) in c.iter().zip(q) {
                    acc += x * y;
                }
                data[bi * s + si] = acc;
            }
        }
        self.out(&[b, s], data, &[context, query], Op::BatchScores { context, query })
    }

    /// `out[b,h] = Σ_s weights[b,s] · context[b,s,h]`.
    pub fn batch_mix(&mut self, weights: Var, context: Var) -> Result<Var> {
        let (tw, tc) = (self.value(weights), self.value(context));
        expect_rank("batch_mix", tc, 3)?;
        expect_rank("batch_mix", tw, 2)?;
        let (b, s, h) = (tc.shape()[0], tc.shape()[1], tc.shape()[2]);
        if tw.shape() != [b, s] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_mix",
                left: tw.shape().to_vec(),
                right: tc.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; b * h];
        for bi in 0..b {
            let out = &mut data[bi * h..(bi + 1) * h];
            for si in 0..s {
                let w = tw.data()[bi * s + si];
                let c = &tc.data()[(bi * s + si) * h..(bi * s + si + 1) * h];
                for (o, &cv) in out.iter_mut().zip(c) {
                    *o += w * cv;
                }
            }
        }
        self.out(&[b, h], data, &[weights, context], Op::BatchMix { weights, context })
    }

    /// Row-wise select: row `i` comes from `on` where `mask[i]`, else `off`.
    pub fn select_rows(&mut self, mask: &[bool], on: Var, off: Var) -> Result<Var> {
        let (ta, tb) = (self.value(on), self.value(off));
        same_shape("select_rows", ta, tb)?;
        if mask.len() != ta.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "select_rows",
                left: ta.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let n = ta.row_len();
        let mut data = Vec::with_capacity(ta.numel());
        for (i, &m) in mask.iter().enumerate() {
            data.extend_from_slice(if m { ta.row(i) } else { tb.row(i) });
        }
        debug_assert_eq!(data.len(), mask.len() * n);
        let shape = ta.shape().to_vec();
        self.out(
            &shape,
            data,
            &[on, off],
            Op::SelectRows {
                mask: mask.to_vec(),
                on,
                off,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.out(&[1], vec![total], &[x], Op::Sum(x))
    }

    /// Summed negative log-likelihood of `targets` under row log-probs;
    /// rows whose target is `pad` contribute nothing.
    pub fn nll_loss(&mut self, logprobs: Var, targets: &[usize], pad: usize) -> Result<Var> {
        let t = self.value(logprobs);
        expect_rank("nll_loss", t, 2)?;
        let (n, v) = (t.shape()[0], t.shape()[1]);
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "nll_loss",
                left: t.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut loss = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            if y == pad {
                continue;
            }
            if y >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "nll_loss",
                    index: y,
                    bound: v,
                });
            }
            loss -= t.data()[i * v + y];
        }
        self.out(
            &[1],
            vec![loss],
            &[logprobs],
            Op::Nll {
                logprobs,
                targets: targets.to_vec(),
                pad,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let numel = tensor::check_shape(shape)?;
        if numel != t.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: t.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let data = t.data().to_vec();
        self.out(shape, data, &[x], Op::Reshape(x))
    }

    /// Reverse pass from a scalar `loss`. Afterwards every grad-requiring
    /// leaf reachable from `loss` holds ∂loss/∂leaf (see [`Tape::grad`]).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<Scalar>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<Scalar>>], v: Var) -> Option<&'g mut Vec<Scalar>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, i: usize, g: &[Scalar], grads: &mut [Option<Vec<Scalar>>]) {
        let y = self.nodes[i].value.get();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    matmul_nt_acc(g, tb.data(), ga, m, n, k);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    matmul_tn_acc(ta.data(), g, gb, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    matmul_acc(g, tb.data(), ga, m, n, k);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    matmul_tn_acc(g, ta.data(), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.grad_buf(grads, *bias) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *o += gv * bv;
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *o += gv * av;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (o, &gv) in gx.iter_mut().zip(g) {
                        *o += gv * s;
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((o, &gv), &yv) in gx.iter_mut().zip(g).zip(y.data()) {
                        *o += gv * (1.0 - yv * yv);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((o, &gv), &yv) in gx.iter_mut().zip(g).zip(y.data()) {
                        *o += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let d = self.value(v).shape()[*axis];
                    if let Some(gv) = self.grad_buf(grads, v) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            add_into(&mut gv[o * d * inner..(o + 1) * d * inner], &g[src..src + d * inner]);
                        }
                    }
                    offset += d;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, dim, inner) = split_axis(self.value(*input).shape(), *axis);
                let len = y.shape()[*axis];
                if let Some(gx) = self.grad_buf(grads, *input) {
                    for o in 0..outer {
                        let dst = (o * dim + start) * inner;
                        add_into(&mut gx[dst..dst + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = y.shape()[1];
                if let Some(gt) = self.grad_buf(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Softmax(x) => {
                let n = y.shape()[1];
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((gxr, gr), yr) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.data().chunks(n)) {
                        let dot: Scalar = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, &gv), &yv) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = y.shape()[1];
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((gxr, gr), yr) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.data().chunks(n)) {
                        let total: Scalar = gr.iter().sum();
                        for ((o, &gv), &yv) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o += gv - yv.exp() * total;
                        }
                    }
                }
            }
            Op::Stack(inputs) => {
                let (b, t, h) = (y.shape()[0], y.shape()[1], y.shape()[2]);
                for (ti, &v) in inputs.iter().enumerate() {
                    if let Some(gv) = self.grad_buf(grads, v) {
                        for bi in 0..b {
                            let src = (bi * t + ti) * h;
                            add_into(&mut gv[bi * h..(bi + 1) * h], &g[src..src + h]);
                        }
                    }
                }
            }
            Op::BatchScores { context, query } => {
                let (tc, tq) = (self.value(*context), self.value(*query));
                let (b, s, h) = (tc.shape()[0], tc.shape()[1], tc.shape()[2]);
                if let Some(gc) = self.grad_buf(grads, *context) {
                    for bi in 0..b {
                        let q = tq.row(bi);
                        for si in 0..s {
                            let gv = g[bi * s + si];
                            let dst = &mut gc[(bi * s + si) * h..(bi * s + si + 1) * h];
                            for (o, &qv) in dst.iter_mut().zip(q) {
                                *o += gv * qv;
                            }
                        }
                    }
                }
                if let Some(gq) = self.grad_buf(grads, *query) {
                    for bi in 0..b {
                        let dst = &mut gq[bi * h..(bi + 1) * h];
                        for si in 0..s {
                            let gv = g[bi * s + si];
                            let c = &tc.data()[(bi * s + si) * h..(bi * s + si + 1) * h];
                            for (o, &cv) in dst.iter_mut().zip(c) {
                                *o += gv * cv;
                            }
                        }
                    }
                }
            }
            Op::BatchMix { weights, context } => {
                let (tw, tc) = (self.value(*weights), self.value(*context));
                let (b, s, h) = (tc.shape()[0], tc.shape()[1], tc.shape()[2]);
                if let Some(gw) = self.grad_buf(grads, *weights) {
                    for bi in 0..b {
                        let gr = &g[bi * h..(bi + 1) * h];
                        for si in 0..s {
                            let c = &tc.data()[(bi * s + si) * h..(bi * s + si + 1) * h];
                            let dot: Scalar = gr.iter().zip(c).map(|(a, b)| a * b).sum();
                            gw[bi * s + si] += dot;
                        }
                    }
                }
                if let Some(gc) = self.grad_buf(grads, *context) {
                    for bi in 0..b {
                        let gr = &g[bi * h..(bi + 1) * h];
                        for si in 0..s {
                            let w = tw.data()[bi * s + si];
                            let dst = &mut gc[(bi * s + si) * h..(bi * s + si + 1) * h];
                            for (o, &gv) in dst.iter_mut().zip(gr) {
                                *o += w * gv;
                            }
                        }
                    }
                }
            }
            Op::SelectRows { mask, on, off } => {
                let n = y.row_len();
                for (target, want) in [(*on, true), (*off, false)] {
                    if let Some(gt) = self.grad_buf(grads, target) {
                        for (r, &m) in mask.iter().enumerate() {
                            if m == want {
                                add_into(&mut gt[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Nll { logprobs, targets, pad } => {
                let v = self.value(*logprobs).shape()[1];
                if let Some(gl) = self.grad_buf(grads, *logprobs) {
                    for (r, &t) in targets.iter().enumerate() {
                        if t != *pad {
                            gl[r * v + t] -= g[0];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    add_into(gx, g);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[Scalar]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let id = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let ai = tape.matmul(a, id).unwrap();
        assert_eq!(tape.value(ai).data(), &[1., 2., 3., 4.]);
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab).data(), &[19., 22., 43., 50.]);
        let x = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        let y = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        match tape.matmul(x, y) {
            Err(TensorError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[0., 0., 0.]));
        let s = tape.softmax_rows(x, None).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = tape.constant(t(&[1, 2], &[0., (2.0 as Scalar).ln()]));
        let s = tape.softmax_rows(x, None).unwrap();
        let d = tape.value(s).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-12 && (d[1] - 2.0 / 3.0).abs() < 1e-12);
        let x = tape.constant(t(&[1, 2], &[1000., 1000.]));
        let s = tape.softmax_rows(x, None).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let err = tape.softmax_rows(x, Some(&[true, false, false, false])).unwrap_err();
        assert_eq!(err, TensorError::FullyMasked { row: 1 });
    }

    #[test]
    fn pointwise_and_shape_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[1], &[0.]));
        let th = tape.tanh(z).unwrap();
        let sg = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(th).data(), &[0.0]);
        assert_eq!(tape.value(sg).data(), &[0.5]);

        let a = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2, 2]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 5]);
        assert!(tape.concat(&[a, b], 0).is_err());

        let table = tape.constant(t(&[3, 1], &[1., 2., 3.]));
        let g = tape.gather_rows(table, &[2, 0]).unwrap();
        assert_eq!(tape.value(g).data(), &[3., 1.]);
        assert!(matches!(
            tape.gather_rows(table, &[3]),
            Err(TensorError::IndexOutOfRange { index: 3, bound: 3, .. })
        ));
        let p = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        assert!(tape.add(a, b).is_err());
        assert!(tape.mul(a, p).is_ok());
    }

    #[test]
    fn backward_bilinear_and_tanh() {
        let a = t(&[3], &[0.3, -0.2, 0.5]).with_grad();
        let b = t(&[3], &[1.5, 2.0, -1.0]);
        let mut tape = Tape::new();
        let va = tape.param(&a);
        let vb = tape.param(&b);
        let p = tape.mul(va, vb).unwrap();
        let loss = tape.sum(p).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(va).unwrap(), b.data());
        assert!(tape.grad(vb).is_none());

        let x = t(&[1], &[0.0]).with_grad();
        let mut tape = Tape::new();
        let vx = tape.param(&x);
        let y = tape.tanh(vx).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(vx).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = t(&[2], &[1.0, 2.0]).with_grad();
        let mut tape = Tape::new();
        let vx = tape.param(&x);
        let y = tape.tanh(vx).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::NonScalarLoss { .. })));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = Σ x⊙x + Σ x → grad = 2x + 1
        let x = t(&[3], &[0.5, -1.0, 2.0]).with_grad();
        let mut tape = Tape::new();
        let vx = tape.param(&x);
        let sq = tape.mul(vx, vx).unwrap();
        let s1 = tape.sum(sq).unwrap();
        let s2 = tape.sum(vx).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(vx).unwrap(), &[2.0, -1.0, 5.0]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let x = t(&[1], &[0.2]).with_grad();
        let mut tape = Tape::inference();
        let vx = tape.param(&x);
        let y = tape.tanh(vx).unwrap();
        assert!(!tape.requires_grad(y));
        tape.backward(y).unwrap();
        assert!(tape.grad(vx).is_none());
    }
}
