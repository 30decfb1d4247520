//! The computation trace and its reverse pass.
//!
//! A [`Trace`] records every primitive applied during a forward pass in
//! creation order, which is automatically topological: the inputs of an
//! operation always exist before its output. [`Trace::backward`] walks the
//! record once in reverse, so a trace of `k` primitives costs `k` local
//! gradient evaluations (reported in [`BackwardStats`]).
//!
//! Traces are single-use: one backward pass consumes the trace. Distinct
//! traces are independent and may run on different threads.

use super::{Buffer, Scalar, Tensor, TensorError};

/// Handle to a tensor recorded on a [`Trace`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// Counters from a backward pass.
#[derive(Clone, Copy, Debug)]
pub struct BackwardStats {
    /// Number of primitive nodes whose local gradient was evaluated.
    pub grad_evals: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize, f64),
    BiasAdd(usize, usize),
    Relu(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    CrossEntropyLogits(usize, Vec<usize>),
    Sum(usize),
    Mean(usize),
    Clamp(usize, f64, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::BiasAdd(..) => "bias_add",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softmax(..) => "softmax",
            Op::CrossEntropyLogits(..) => "cross_entropy_logits",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Clamp(..) => "clamp",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::BiasAdd(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softmax(a)
            | Op::CrossEntropyLogits(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Clamp(a, _, _) => vec![a],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    marked: bool,
}

/// Ordered record of the primitives applied during a forward pass.
pub struct Trace {
    nodes: Vec<Node>,
    consumed: bool,
}

// ---------------------------------------------------------------------------
// generic kernels
// ---------------------------------------------------------------------------

fn k_matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                dst[j] = dst[j] + av * row[j];
            }
        }
    }
    out
}

/// C = A * B^T where A is [m, k] and B is [n, k].
fn k_matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..k {
                acc = acc + a[i * k + p] * b[j * k + p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// C = A^T * B where A is [k, m] and B is [k, n].
fn k_matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        for i in 0..m {
            let av = a[p * m + i];
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                dst[j] = dst[j] + av * row[j];
            }
        }
    }
    out
}

fn stable_softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn k_softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(row[0], T::max);
        let mut sum = T::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out[r * cols + j] = e;
            sum = sum + e;
        }
        for j in 0..cols {
            out[r * cols + j] = out[r * cols + j] / sum;
        }
    }
    out
}

fn k_ce_logits<T: Scalar>(x: &[T], labels: &[usize], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(row[0], T::max);
        let mut sum = T::zero();
        for &v in row {
            sum = sum + (v - m).exp();
        }
        out[r] = m + sum.ln() - row[labels[r]];
    }
    out
}


fn k_scale<T: Scalar>(x: &[T], c: f64) -> Vec<T> {
    let c = T::from_f64(c);
    x.iter().map(|&v| v * c).collect()
}

fn k_offset<T: Scalar>(x: &[T], c: f64) -> Vec<T> {
    let c = T::from_f64(c);
    x.iter().map(|&v| v + c).collect()
}

fn k_relu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect()
}

fn k_clamp<T: Scalar>(x: &[T], lo: f64, hi: f64) -> Vec<T> {
    let lo = T::from_f64(lo);
    let hi = T::from_f64(hi);
    x.iter()
        .map(|&v| if v < lo { lo } else if v > hi { hi } else { v })
        .collect()
}

fn k_relu_mask<T: Scalar>(g: &[T], x: &[T]) -> Vec<T> {
    g.iter()
        .zip(x)
        .map(|(&p, &v)| if v > T::zero() { p } else { T::zero() })
        .collect()
}

fn k_clamp_mask<T: Scalar>(g: &[T], x: &[T], lo: f64, hi: f64) -> Vec<T> {
    let lo = T::from_f64(lo);
    let hi = T::from_f64(hi);
    g.iter()
        .zip(x)
        .map(|(&p, &v)| if v >= lo && v <= hi { p } else { T::zero() })
        .collect()
}

fn k_bias_sum<T: Scalar>(g: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for r in 0..rows {
        for j in 0..cols {
            out[j] = out[j] + g[r * cols + j];
        }
    }
    out
}

fn k_softmax_grad<T: Scalar>(g: &[T], s: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let g_row = &g[r * cols..(r + 1) * cols];
        let s_row = &s[r * cols..(r + 1) * cols];
        let mut dot = T::zero();
        for j in 0..cols {
            dot = dot + g_row[j] * s_row[j];
        }
        for j in 0..cols {
            dx[r * cols + j] = s_row[j] * (g_row[j] - dot);
        }
    }
    dx
}

fn k_ce_grad<T: Scalar>(g: &[T], x: &[T], labels: &[usize], rows: usize, cols: usize) -> Vec<T> {
    let mut dx = k_softmax_rows(x, rows, cols);
    for r in 0..rows {
        dx[r * cols + labels[r]] = dx[r * cols + labels[r]] - T::one();
        for j in 0..cols {
            dx[r * cols + j] = dx[r * cols + j] * g[r];
        }
    }
    dx
}

fn k_fill<T: Scalar>(value: T, scale: f64, n: usize) -> Vec<T> {
    vec![value * T::from_f64(scale); n]
}

// ---------------------------------------------------------------------------
// dispatch helpers
// ---------------------------------------------------------------------------

macro_rules! unary {
    ($buf:expr, |$x:ident| $body:expr) => {
        match &$buf {
            Buffer::F32($x) => Buffer::F32($body),
            Buffer::F64($x) => Buffer::F64($body),
        }
    };
}

macro_rules! binary {
    ($op:expr, $a:expr, $b:expr, |$x:ident, $y:ident| $body:expr) => {
        match (&$a, &$b) {
            (Buffer::F32($x), Buffer::F32($y)) => Buffer::F32($body),
            (Buffer::F64($x), Buffer::F64($y)) => Buffer::F64($body),
            _ => {
                return Err(TensorError::DtypeMismatch {
                    op: $op,
                    lhs: $a.dtype(),
                    rhs: $b.dtype(),
                })
            }
        }
    };
}

fn accumulate(slot: &mut Option<Buffer>, delta: Buffer) {
    match slot {
        None => *slot = Some(delta),
        Some(acc) => match (acc, delta) {
            (Buffer::F32(a), Buffer::F32(d)) => {
                for (x, y) in a.iter_mut().zip(d) {
                    *x += y;
                }
            }
            (Buffer::F64(a), Buffer::F64(d)) => {
                for (x, y) in a.iter_mut().zip(d) {
                    *x += y;
                }
            }
            _ => unreachable!("adjoint dtype is fixed by the forward value"),
        },
    }
}

impl Trace {
    pub fn new() -> Trace {
        Trace {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Registers `value` on the trace. `marked` tensors are differentiation
    /// targets: backward() fills their grad slot.
    pub fn leaf(&mut self, value: Tensor, marked: bool) -> TensorId {
        self.push(Op::Leaf, value, marked, marked)
    }

    /// Registers a constant (non-differentiable) leaf.
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the marked tensor `id`, available after backward().
    pub fn grad(&self, id: TensorId) -> Option<Tensor> {
        self.nodes[id.0].value.grad()
    }

    pub fn op_name(&self, id: TensorId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn input_ids(&self, id: TensorId) -> Vec<TensorId> {
        self.nodes[id.0].op.inputs().into_iter().map(TensorId).collect()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, marked: bool) -> TensorId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            marked,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn check(&self, id: TensorId) -> Result<(), TensorError> {
        if id.0 >= self.nodes.len() {
            return Err(TensorError::UnknownId(id.0));
        }
        Ok(())
    }

    fn node_value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn record(&mut self, op: Op, value: Tensor) -> TensorId {
        let requires = self.needs_grad(&op.inputs().into_iter().map(TensorId).collect::<Vec<_>>());
        self.push(op, value, requires, false)
    }

    // -- primitives ---------------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]` matrix product.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.node_value(a), self.node_value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::BadRank {
                op: "matmul",
                shape: if sa.len() != 2 { sa.to_vec() } else { sb.to_vec() },
            });
        }
        if sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = binary!("matmul", ta.data, tb.data, |x, y| k_matmul(x, y, m, k, n));
        let value = Tensor::from_buffer(vec![m, n], data);
        Ok(self.record(Op::MatMul(a.0, b.0), value))
    }

    fn elementwise_pair(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<(), TensorError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.node_value(a), self.node_value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.elementwise_pair("add", a, b)?;
        let (ta, tb) = (self.node_value(a), self.node_value(b));
        let data = binary!("add", ta.data, tb.data, |x, y| x
            .iter()
            .zip(y)
            .map(|(&p, &q)| p + q)
            .collect());
        let value = Tensor::from_buffer(ta.shape().to_vec(), data);
        Ok(self.record(Op::Add(a.0, b.0), value))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.elementwise_pair("sub", a, b)?;
        let (ta, tb) = (self.node_value(a), self.node_value(b));
        let data = binary!("sub", ta.data, tb.data, |x, y| x
            .iter()
            .zip(y)
            .map(|(&p, &q)| p - q)
            .collect());
        let value = Tensor::from_buffer(ta.shape().to_vec(), data);
        Ok(self.record(Op::Sub(a.0, b.0), value))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.elementwise_pair("mul", a, b)?;
        let (ta, tb) = (self.node_value(a), self.node_value(b));
        let data = binary!("mul", ta.data, tb.data, |x, y| x
            .iter()
            .zip(y)
            .map(|(&p, &q)| p * q)
            .collect());
        let value = Tensor::from_buffer(ta.shape().to_vec(), data);
        Ok(self.record(Op::Mul(a.0, b.0), value))
    }

    /// Elementwise multiplication by a compile-time constant.
    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId, TensorError> {
        self.check(a)?;
        let ta = self.node_value(a);
        let data = unary!(ta.data, |x| k_scale(x, c));
        let value = Tensor::from_buffer(ta.shape().to_vec(), data);
        Ok(self.record(Op::Scale(a.0, c), value))
    }

    /// Elementwise addition of a compile-time constant.
    pub fn offset(&mut self, a: TensorId, c: f64) -> Result<TensorId, TensorError> {
        self.check(a)?;
        let ta = self.node_value(a);
        let data = unary!(ta.data, |x| k_offset(x, c));
        let value = Tensor::from_buffer(ta.shape().to_vec(), data);
        Ok(self.record(Op::Offset(a.0, c), value))
    }

    /// `[r, c] + [c]` trailing-axis broadcast add (the only broadcast form).
    pub fn bias_add(&mut self, x: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check(x)?;
        self.check(b)?;
        let (tx, tb) = (self.node_value(x), self.node_value(b));
        let (sx, sb) = (tx.shape(), tb.shape());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "bias_add",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let data = binary!("bias_add", tx.data, tb.data, |x, y| {
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for j in 0..cols {
                    out.push(x[r * cols + j] + y[j]);
                }
            }
            out
        });
        let value = Tensor::from_buffer(vec![rows, cols], data);
        Ok(self.record(Op::BiasAdd(x.0, b.0), value))
    }

    /// max(x, 0); the subgradient at 0 is defined as 0.
    pub fn relu(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.check(a)?;
        let ta = self.node_value(a);
        let data = unary!(ta.data, |x| k_relu(x));
        let value = Tensor::from_buffer(ta.shape().to_vec(), data);
        Ok(self.record(Op::Relu(a.0), value))
    }

    /// ln(1 + e^x), evaluated in overflow-safe form.
    pub fn softplus(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.check(a)?;
        let ta = self.node_value(a);
        let data = unary!(ta.data, |x| x.iter().map(|&v| stable_softplus(v)).collect());
        let value = Tensor::from_buffer(ta.shape().to_vec(), data);
        Ok(self.record(Op::Softplus(a.0), value))
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.check(a)?;
        let ta = self.node_value(a);
        let data = unary!(ta.data, |x| x.iter().map(|&v| v.exp()).collect());
        let value = Tensor::from_buffer(ta.shape().to_vec(), data);
        Ok(self.record(Op::Exp(a.0), value))
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.check(a)?;
        let ta = self.node_value(a);
        let data = unary!(ta.data, |x| x.iter().map(|&v| v.ln()).collect());
        let value = Tensor::from_buffer(ta.shape().to_vec(), data);
        Ok(self.record(Op::Log(a.0), value))
    }

    /// Row-wise softmax of a `[rows, cols]` tensor, max-subtracted.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.check(a)?;
        let ta = self.node_value(a);
        let s = ta.shape();
        if s.len() != 2 {
            return Err(TensorError::BadRank {
                op: "softmax",
                shape: s.to_vec(),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let data = unary!(ta.data, |x| k_softmax_rows(x, rows, cols));
        let value = Tensor::from_buffer(vec![rows, cols], data);
        Ok(self.record(Op::Softmax(a.0), value))
    }

    /// Per-row cross-entropy between `[rows, classes]` logits and integer
    /// labels, fused with max-subtracted log-sum-exp.
    pub fn cross_entropy_logits(
        &mut self,
        logits: TensorId,
        labels: &[usize],
    ) -> Result<TensorId, TensorError> {
        self.check(logits)?;
        let tl = self.node_value(logits);
        let s = tl.shape();
        if s.len() != 2 {
            return Err(TensorError::BadRank {
                op: "cross_entropy_logits",
                shape: s.to_vec(),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        if labels.len() != rows {
            return Err(TensorError::LabelCountMismatch {
                rows,
                labels: labels.len(),
            });
        }
        for (r, &y) in labels.iter().enumerate() {
            if y >= cols {
                return Err(TensorError::LabelOutOfRange {
                    row: r,
                    label: y,
                    classes: cols,
                });
            }
        }
        let data = unary!(tl.data, |x| k_ce_logits(x, labels, rows, cols));
        let value = Tensor::from_buffer(vec![rows], data);
        Ok(self.record(Op::CrossEntropyLogits(logits.0, labels.to_vec()), value))
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.check(a)?;
        let ta = self.node_value(a);
        let total: f64 = match &ta.data {
            Buffer::F32(v) => {
                let mut acc = 0.0f32;
                for &x in v {
                    acc += x;
                }
                f64::from(acc)
            }
            Buffer::F64(v) => {
                let mut acc = 0.0f64;
                for &x in v {
                    acc += x;
                }
                acc
            }
        };
        let value = Tensor::from_buffer(vec![], Buffer::from_f64_values(ta.dtype(), &[total]));
        Ok(self.record(Op::Sum(a.0), value))
    }

    /// Mean of all elements, as a rank-0 scalar.
    pub fn mean(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.check(a)?;
        let n = self.node_value(a).numel();
        let ta = self.node_value(a);
        let mean: f64 = match &ta.data {
            Buffer::F32(v) => {
                let mut acc = 0.0f32;
                for &x in v {
                    acc += x;
                }
                f64::from(acc / n as f32)
            }
            Buffer::F64(v) => {
                let mut acc = 0.0f64;
                for &x in v {
                    acc += x;
                }
                acc / n as f64
            }
        };
        let value = Tensor::from_buffer(vec![], Buffer::from_f64_values(ta.dtype(), &[mean]));
        Ok(self.record(Op::Mean(a.0), value))
    }

    /// Elementwise clamp into `[lo, hi]`; gradient passes inside the
    /// closed interval.
    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> Result<TensorId, TensorError> {
        assert!(lo <= hi, "clamp: lo {lo} must not exceed hi {hi}");
        self.check(a)?;
        let ta = self.node_value(a);
        let data = unary!(ta.data, |x| k_clamp(x, lo, hi));
        let value = Tensor::from_buffer(ta.shape().to_vec(), data);
        Ok(self.record(Op::Clamp(a.0, lo, hi), value))
    }

    // -- reverse pass --------------------------------------------------------

    /// Propagates d(loss)/d(tensor) to every marked leaf. The trace is
    /// consumed; a second call fails.
    pub fn backward(&mut self, loss: TensorId) -> Result<BackwardStats, TensorError> {
        self.check(loss)?;
        if self.consumed {
            return Err(TensorError::TraceConsumed);
        }
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        self.consumed = true;

        let mut adjoints: Vec<Option<Buffer>> = (0..self.nodes.len()).map(|_| None).collect();
        let dtype = loss_node.value.dtype();
        adjoints[loss.0] = Some(Buffer::from_f64_values(dtype, &[1.0]));

        let mut grad_evals = 0usize;
        for id in (0..=loss.0).rev() {
            if adjoints[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let adj = adjoints[id].take().expect("adjoint present");
            grad_evals += 1;
            self.backprop_node(id, &adj, &mut adjoints)?;
        }

        for (id, node) in self.nodes.iter_mut().enumerate() {
            if node.marked {
                let g = adjoints[id]
                    .take()
                    .unwrap_or_else(|| Buffer::zeros(node.value.dtype(), node.value.numel()));
                node.value.grad = Some(g);
            }
        }
        Ok(BackwardStats { grad_evals })
    }

    fn backprop_node(
        &self,
        id: usize,
        adj: &Buffer,
        adjoints: &mut [Option<Buffer>],
    ) -> Result<(), TensorError> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.nodes[*a].requires_grad {
                    let da = binary!("matmul_grad", *adj, tb.data, |g, y| k_matmul_nt(
                        g, y, m, n, k
                    ));
                    accumulate(&mut adjoints[*a], da);
                }
                if self.nodes[*b].requires_grad {
                    let db = binary!("matmul_grad", ta.data, *adj, |x, g| k_matmul_tn(
                        x, g, k, m, n
                    ));
                    accumulate(&mut adjoints[*b], db);
                }
            }
            Op::Add(a, b) => {
                if self.nodes[*a].requires_grad {
                    accumulate(&mut adjoints[*a], adj.clone());
                }
                if self.nodes[*b].requires_grad {
                    accumulate(&mut adjoints[*b], adj.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.nodes[*a].requires_grad {
                    accumulate(&mut adjoints[*a], adj.clone());
                }
                if self.nodes[*b].requires_grad {
                    let neg = unary!(*adj, |g| g.iter().map(|&v| -v).collect());
                    accumulate(&mut adjoints[*b], neg);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].requires_grad {
                    let da = binary!("mul_grad", *adj, tb.data, |g, y| g
                        .iter()
                        .zip(y)
                        .map(|(&p, &q)| p * q)
                        .collect());
                    accumulate(&mut adjoints[*a], da);
                }
                if self.nodes[*b].requires_grad {
                    let db = binary!("mul_grad", *adj, ta.data, |g, x| g
                        .iter()
                        .zip(x)
                        .map(|(&p, &q)| p * q)
                        .collect());
                    accumulate(&mut adjoints[*b], db);
                }
            }
            Op::Scale(a, c) => {
                if self.nodes[*a].requires_grad {
                    let c = *c;
                    let da = unary!(*adj, |g| k_scale(g, c));
                    accumulate(&mut adjoints[*a], da);
                }
            }
            Op::Offset(a, _) => {
                if self.nodes[*a].requires_grad {
                    accumulate(&mut adjoints[*a], adj.clone());
                }
            }
            Op::BiasAdd(x, b) => {
                let tx = &self.nodes[*x].value;
                let (rows, cols) = (tx.shape()[0], tx.shape()[1]);
                if self.nodes[*x].requires_grad {
                    accumulate(&mut adjoints[*x], adj.clone());
                }
                if self.nodes[*b].requires_grad {
                    let db = unary!(*adj, |g| k_bias_sum(g, rows, cols));
                    accumulate(&mut adjoints[*b], db);
                }
            }
            Op::Relu(a) => {
                if self.nodes[*a].requires_grad {
                    let ta = &self.nodes[*a].value;
                    let da = binary!("relu_grad", *adj, ta.data, |g, x| k_relu_mask(g, x));
                    accumulate(&mut adjoints[*a], da);
                }
            }
            Op::Softplus(a) => {
                if self.nodes[*a].requires_grad {
                    let ta = &self.nodes[*a].value;
                    let da = binary!("softplus_grad", *adj, ta.data, |g, x| g
                        .iter()
                        .zip(x)
                        .map(|(&p, &v)| p * sigmoid(v))
                        .collect());
                    accumulate(&mut adjoints[*a], da);
                }
            }
            Op::Exp(a) => {
                if self.nodes[*a].requires_grad {
                    let out = &node.value;
                    let da = binary!("exp_grad", *adj, out.data, |g, y| g
                        .iter()
                        .zip(y)
                        .map(|(&p, &q)| p * q)
                        .collect());
                    accumulate(&mut adjoints[*a], da);
                }
            }
            Op::Log(a) => {
                if self.nodes[*a].requires_grad {
                    let ta = &self.nodes[*a].value;
                    let da = binary!("log_grad", *adj, ta.data, |g, x| g
                        .iter()
                        .zip(x)
                        .map(|(&p, &v)| p / v)
                        .collect());
                    accumulate(&mut adjoints[*a], da);
                }
            }
            Op::Softmax(a) => {
                if self.nodes[*a].requires_grad {
                    let out = &node.value;
                    let (rows, cols) = (out.shape()[0], out.shape()[1]);
                    let da = binary!("softmax_grad", *adj, out.data, |g, s| k_softmax_grad(
                        g, s, rows, cols
                    ));
                    accumulate(&mut adjoints[*a], da);
                }
            }
            Op::CrossEntropyLogits(a, labels) => {
                if self.nodes[*a].requires_grad {
                    let ta = &self.nodes[*a].value;
                    let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
                    let da = binary!("ce_grad", *adj, ta.data, |g, x| k_ce_grad(
                        g, x, labels, rows, cols
                    ));
                    accumulate(&mut adjoints[*a], da);
                }
            }
            Op::Sum(a) => {
                if self.nodes[*a].requires_grad {
                    let n = self.nodes[*a].value.numel();
                    let da = unary!(*adj, |g| k_fill(g[0], 1.0, n));
                    accumulate(&mut adjoints[*a], da);
                }
            }
            Op::Mean(a) => {
                if self.nodes[*a].requires_grad {
                    let n = self.nodes[*a].value.numel();
                    let da = unary!(*adj, |g| k_fill(g[0], 1.0 / n as f64, n));
                    accumulate(&mut adjoints[*a], da);
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.nodes[*a].requires_grad {
                    let ta = &self.nodes[*a].value;
                    let (lo, hi) = (*lo, *hi);
                    let da = binary!("clamp_grad", *adj, ta.data, |g, x| k_clamp_mask(
                        g, x, lo, hi
                    ));
                    accumulate(&mut adjoints[*a], da);
                }
            }
        }
        Ok(())
    }

    /// Re-executes every recorded primitive from its stored inputs and
    /// checks the stored outputs bit-for-bit.
    pub fn verify_replay(&self) -> Result<bool, TensorError> {
        for node in &self.nodes {
            let recomputed = match &node.op {
                Op::Leaf => continue,
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    binary!("matmul", ta.data, tb.data, |x, y| k_matmul(x, y, m, k, n))
                }
                Op::Add(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    binary!("add", ta.data, tb.data, |x, y| x
                        .iter()
                        .zip(y)
                        .map(|(&p, &q)| p + q)
                        .collect())
                }
                Op::Sub(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    binary!("sub", ta.data, tb.data, |x, y| x
                        .iter()
                        .zip(y)
                        .map(|(&p, &q)| p - q)
                        .collect())
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    binary!("mul", ta.data, tb.data, |x, y| x
                        .iter()
                        .zip(y)
                        .map(|(&p, &q)| p * q)
                        .collect())
                }
                Op::Scale(a, c) => {
                    let ta = &self.nodes[*a].value;
                    let c = *c;
                    unary!(ta.data, |x| k_scale(x, c))
                }
                Op::Offset(a, c) => {
                    let ta = &self.nodes[*a].value;
                    let c = *c;
                    unary!(ta.data, |x| k_offset(x, c))
                }
                Op::BiasAdd(x, b) => {
                    let (tx, tb) = (&self.nodes[*x].value, &self.nodes[*b].value);
                    let (rows, cols) = (tx.shape()[0], tx.shape()[1]);
                    binary!("bias_add", tx.data, tb.data, |x, y| {
                        let mut out = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            for j in 0..cols {
                                out.push(x[r * cols + j] + y[j]);
                            }
                        }
                        out
                    })
                }
                Op::Relu(a) => {
                    let ta = &self.nodes[*a].value;
                    unary!(ta.data, |x| k_relu(x))
                }
                Op::Softplus(a) => {
                    let ta = &self.nodes[*a].value;
                    unary!(ta.data, |x| x.iter().map(|&v| stable_softplus(v)).collect())
                }
                Op::Exp(a) => {
                    let ta = &self.nodes[*a].value;
                    unary!(ta.data, |x| x.iter().map(|&v| v.exp()).collect())
                }
                Op::Log(a) => {
                    let ta = &self.nodes[*a].value;
                    unary!(ta.data, |x| x.iter().map(|&v| v.ln()).collect())
                }
                Op::Softmax(a) => {
                    let ta = &self.nodes[*a].value;
                    let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
                    unary!(ta.data, |x| k_softmax_rows(x, rows, cols))
                }
                Op::CrossEntropyLogits(a, labels) => {
                    let ta = &self.nodes[*a].value;
                    let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
                    unary!(ta.data, |x| k_ce_logits(x, labels, rows, cols))
                }
                Op::Sum(_) | Op::Mean(_) => {
                    // Scalar reductions: recompute through the public path.
                    let mut t = Trace::new();
                    let (src, is_mean) = match node.op {
                        Op::Sum(a) => (a, false),
                        Op::Mean(a) => (a, true),
                        _ => unreachable!(),
                    };
                    let id = t.constant(self.nodes[src].value.clone());
                    let out = if is_mean { t.mean(id)? } else { t.sum(id)? };
                    t.node_value(out).data.clone()
                }
                Op::Clamp(a, lo, hi) => {
                    let ta = &self.nodes[*a].value;
                    let (lo, hi) = (*lo, *hi);
                    unary!(ta.data, |x| k_clamp(x, lo, hi))
                }
            };
            if !recomputed.bits_eq(&node.value.data) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

impl Default for Trace {
    fn default() -> Self {
        Trace::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn softplus_at_zero_is_ln_two() {
        let mut tr = Trace::new();
        let x = tr.constant(t64(vec![1], vec![0.0]));
        let y = tr.softplus(x).unwrap();
        let got = tr.value(y).value_at(0);
        assert!((got - std::f64::consts::LN_2).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn relu_definition() {
        let mut tr = Trace::new();
        let x = tr.constant(t64(vec![2], vec![-3.5, 2.0]));
        let y = tr.relu(x).unwrap();
        assert_eq!(tr.value(y).to_f64_vec(), vec![0.0, 2.0]);
    }

    #[test]
    fn cross_entropy_uniform_two_classes_is_ln_two() {
        let mut tr = Trace::new();
        let logits = tr.constant(t64(vec![1, 2], vec![0.0, 0.0]));
        let loss = tr.cross_entropy_logits(logits, &[0]).unwrap();
        let got = tr.value(loss).value_at(0);
        assert!((got - std::f64::consts::LN_2).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let mut tr = Trace::new();
        let x = tr.leaf(t64(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 9.0]), true);
        let s = tr.sum(x).unwrap();
        tr.backward(s).unwrap();
        assert_eq!(tr.grad(x).unwrap().to_f64_vec(), vec![1.0; 6]);
    }

    #[test]
    fn relu_chain_rule_in_active_region() {
        // loss = relu(2 * x) at x = 3 -> dloss/dx = 2
        let mut tr = Trace::new();
        let x = tr.leaf(t64(vec![1], vec![3.0]), true);
        let scaled = tr.scale(x, 2.0).unwrap();
        let r = tr.relu(scaled).unwrap();
        let loss = tr.sum(r).unwrap();
        tr.backward(loss).unwrap();
        assert_eq!(tr.grad(x).unwrap().to_f64_vec(), vec![2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tr = Trace::new();
        let x = tr.leaf(t64(vec![2], vec![1.0, 2.0]), true);
        let err = tr.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn backward_consumes_the_trace() {
        let mut tr = Trace::new();
        let x = tr.leaf(t64(vec![1], vec![1.0]), true);
        let s = tr.sum(x).unwrap();
        tr.backward(s).unwrap();
        let err = tr.backward(s).unwrap_err();
        assert!(matches!(err, TensorError::TraceConsumed));
    }

    #[test]
    fn dtype_mixing_is_an_error() {
        let mut tr = Trace::new();
        let a = tr.constant(t64(vec![2], vec![1.0, 2.0]));
        let b = tr.constant(Tensor::from_f32(vec![2], vec![1.0, 2.0]).unwrap());
        let err = tr.add(a, b).unwrap_err();
        assert!(matches!(err, TensorError::DtypeMismatch { .. }));
    }

    #[test]
    fn shape_mismatch_names_operation_and_shapes() {
        let mut tr = Trace::new();
        let a = tr.constant(t64(vec![2, 2], vec![1.0; 4]));
        let b = tr.constant(t64(vec![3, 2], vec![1.0; 6]));
        let err = tr.matmul(a, b).unwrap_err();
        match err {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 2]);
                assert_eq!(rhs, vec![3, 2]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn grad_evals_is_linear_in_trace_length() {
        let mut tr = Trace::new();
        let x = tr.leaf(t64(vec![4], vec![0.5, -1.0, 2.0, 0.25]), true);
        let mut cur = x;
        let chain = 17;
        for _ in 0..chain {
            cur = tr.softplus(cur).unwrap();
        }
        let loss = tr.sum(cur).unwrap();
        let ops = tr.len() - 1; // minus the leaf
        let stats = tr.backward(loss).unwrap();
        assert_eq!(ops, chain + 1);
        assert!(stats.grad_evals <= ops);
        assert_eq!(stats.grad_evals, ops);
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let run = || {
            let mut tr = Trace::new();
            let x = tr.constant(t64(vec![2, 2], vec![0.3, -0.7, 1.9, 2.2]));
            let w = tr.constant(t64(vec![2, 2], vec![0.11, -0.5, 0.23, 0.81]));
            let h = tr.matmul(x, w).unwrap();
            let r = tr.relu(h).unwrap();
            let s = tr.softmax(r).unwrap();
            tr.value(s).clone()
        };
        assert!(run().bits_eq(&run()));
    }

    #[test]
    fn replay_reproduces_forward_exactly() {
        let mut tr = Trace::new();
        let x = tr.constant(t64(vec![2, 3], vec![0.3, -0.7, 1.9, 2.2, -0.1, 0.0]));
        let w = tr.constant(t64(vec![3, 2], vec![0.11, -0.5, 0.23, 0.81, -1.2, 0.4]));
        let b = tr.constant(t64(vec![2], vec![0.05, -0.07]));
        let h = tr.matmul(x, w).unwrap();
        let z = tr.bias_add(h, b).unwrap();
        let r = tr.relu(z).unwrap();
        let ce = tr.cross_entropy_logits(r, &[1, 0]).unwrap();
        let _ = tr.mean(ce).unwrap();
        assert!(tr.verify_replay().unwrap());
    }

    #[test]
    fn trace_is_topologically_ordered() {
        let mut tr = Trace::new();
        let x = tr.constant(t64(vec![1, 2], vec![1.0, 2.0]));
        let w = tr.constant(t64(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]));
        let h = tr.matmul(x, w).unwrap();
        let s = tr.softmax(h).unwrap();
        let _ = tr.sum(s).unwrap();
        for i in 0..tr.len() {
            for input in tr.input_ids(TensorId(i)) {
                assert!(input.0 < i, "node {i} consumes later node {}", input.0);
            }
        }
    }

    #[test]
    fn unmarked_leaves_keep_empty_grad_slots() {
        let mut tr = Trace::new();
        let x = tr.leaf(t64(vec![2], vec![1.0, 2.0]), true);
        let c = tr.constant(t64(vec![2], vec![3.0, 4.0]));
        let p = tr.mul(x, c).unwrap();
        let loss = tr.sum(p).unwrap();
        tr.backward(loss).unwrap();
        assert_eq!(tr.grad(x).unwrap().to_f64_vec(), vec![3.0, 4.0]);
        assert!(tr.grad(c).is_none());
    }

    #[test]
    fn marked_leaf_off_the_loss_path_gets_zero_grad() {
        let mut tr = Trace::new();
        let x = tr.leaf(t64(vec![2], vec![1.0, 2.0]), true);
        let unused = tr.leaf(t64(vec![3], vec![5.0, 6.0, 7.0]), true);
        let loss = tr.sum(x).unwrap();
        tr.backward(loss).unwrap();
        assert_eq!(tr.grad(unused).unwrap().to_f64_vec(), vec![0.0; 3]);
    }

    #[test]
    fn clamp_passes_gradient_only_inside_interval() {
        let mut tr = Trace::new();
        let x = tr.leaf(t64(vec![3], vec![-2.0, 0.5, 3.0]), true);
        let c = tr.clamp(x, 0.0, 1.0).unwrap();
        assert_eq!(tr.value(c).to_f64_vec(), vec![0.0, 0.5, 1.0]);
        let loss = tr.sum(c).unwrap();
        tr.backward(loss).unwrap();
        assert_eq!(tr.grad(x).unwrap().to_f64_vec(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_under_large_logits() {
        let mut tr = Trace::new();
        let x = tr.constant(t64(vec![2, 3], vec![500.0, 0.0, -500.0, 1e4, 1e4, 1e4]));
        let s = tr.softmax(x).unwrap();
        let v = tr.value(s).to_f64_vec();
        assert!(v.iter().all(|p| p.is_finite()));
        for r in 0..2 {
            let sum: f64 = v[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn f32_kernels_compute_in_native_precision() {
        let mut tr = Trace::new();
        let a = tr.constant(Tensor::from_f32(vec![2], vec![0.1, 0.2]).unwrap());
        let b = tr.constant(Tensor::from_f32(vec![2], vec![0.3, 0.4]).unwrap());
        let s = tr.add(a, b).unwrap();
        let expect = [0.1f32 + 0.3f32, 0.2f32 + 0.4f32];
        let got = tr.value(s);
        assert_eq!(got.dtype(), DType::F32);
        assert_eq!(got.to_f64_vec(), expect.map(f64::from).to_vec());
    }
}
