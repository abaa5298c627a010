//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. The tape
//! is rebuilt for each optimization step: parameters enter as leaves, the
//! objective is assembled from the recorded ops, and [`Tape::backward`]
//! writes `d root / d leaf` into every leaf that requires a gradient.
//!
//! Broadcasting is restricted to leading-dimension expansion: the smaller
//! operand of a binary op must match the trailing dimensions of the larger one
//! (scalars broadcast everywhere).

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Column vector `[n, 1]`.
    pub fn column(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len(), 1],
            data: values,
        }
    }

    /// Builds a `[rows.len(), width]` matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], width: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * width);
        for row in rows {
            let row = row.as_ref();
            if row.len() != width {
                return Err(Error::shape("from_rows", &[width], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor {
            shape: vec![rows.len(), width],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds reachable through [`Tape::forward_op`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Neg,
    Square,
    Exp,
    Log,
    Sigmoid,
    Softplus,
    LogSigmoid,
    Tanh,
    Relu,
    Mean,
    Sum,
    Concat,
    Slice { start: usize, end: usize },
    Broadcast { rows: usize },
    Scale(f64),
    AddScalar(f64),
    Clamp { lo: f64, hi: f64 },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Broadcast(Var),
    GatherRows(Var, Vec<usize>),
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Square,
    Exp,
    Log,
    Sigmoid,
    Softplus,
    LogSigmoid,
    Tanh,
    Relu,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln sigmoid(x) = -softplus(-x)`; never exponentiates a large positive value.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Square => x * x,
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::LogSigmoid => log_sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
        }
    }

    /// Local derivative given the input `x` and the output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Square => 2.0 * x,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::LogSigmoid => sigmoid(-x),
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Shape of the result of broadcasting `a` against `b`, plus which side
/// (if any) is repeated. Only leading-dimension expansion is supported.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    let (big, small) = if na > nb || (na == nb && a.len() >= b.len()) {
        (a, b)
    } else {
        (b, a)
    };
    let lead = small.iter().take_while(|&&d| d == 1).count();
    let trimmed = &small[lead..];
    if trimmed.len() <= big.len() && big.ends_with(trimmed) {
        Ok(big.to_vec())
    } else {
        Err(Error::shape(op, a, b))
    }
}

/// Per-step record of differentiable operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Drops every recorded node; previously issued [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    /// Zeroes accumulated leaf gradients without discarding the graph.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Records a trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
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

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Generic dispatcher over [`OpKind`]; the named methods are the usual entry points.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::Usage(format!(
                    "{kind:?} expects {n} input(s), got {}",
                    inputs.len()
                )));
            }
            Ok(())
        };
        match kind {
            OpKind::Concat => self.concat(inputs),
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                match kind {
                    OpKind::MatMul => self.matmul(a, b),
                    OpKind::Add => self.add(a, b),
                    OpKind::Sub => self.sub(a, b),
                    _ => self.mul(a, b),
                }
            }
            _ => {
                arity(1)?;
                let x = inputs[0];
                match kind {
                    OpKind::Neg => Ok(self.neg(x)),
                    OpKind::Square => Ok(self.square(x)),
                    OpKind::Exp => Ok(self.exp(x)),
                    OpKind::Log => self.log(x),
                    OpKind::Sigmoid => Ok(self.sigmoid(x)),
                    OpKind::Softplus => Ok(self.softplus(x)),
                    OpKind::LogSigmoid => Ok(self.log_sigmoid(x)),
                    OpKind::Tanh => Ok(self.tanh(x)),
                    OpKind::Relu => Ok(self.relu(x)),
                    OpKind::Mean => Ok(self.mean(x)),
                    OpKind::Sum => Ok(self.sum(x)),
                    OpKind::Slice { start, end } => self.slice_cols(x, start, end),
                    OpKind::Broadcast { rows } => self.broadcast_rows(x, rows),
                    OpKind::Scale(c) => Ok(self.scale(x, c)),
                    OpKind::AddScalar(c) => Ok(self.add_scalar(x, c)),
                    OpKind::Clamp { lo, hi } => Ok(self.clamp(x, lo, hi)),
                    _ => unreachable!(),
                }
            }
        }
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Normal(k),
            self.value(b).data(),
            Layout::Normal(n),
            &mut out,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let data = if va.len() == n && vb.len() == n {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n)
                .map(|i| f(va[i % va.len()], vb[i % vb.len()]))
                .collect()
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape, data }, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn unary(&mut self, x: Var, u: Unary) -> Var {
        let value = self.value(x);
        let data = value.data().iter().map(|&v| u.apply(v)).collect();
        let shape = value.shape().to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor { shape, data }, Op::Unary(u, x), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    /// Natural log; every input element must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::NumericDomain(format!(
                "log of non-positive value {bad}"
            )));
        }
        Ok(self.unary(x, Unary::Log))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    /// Fused `ln sigmoid(x)`, evaluated as `-softplus(-x)`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::LogSigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x);
        let data = value.data().iter().map(|&v| v * c).collect();
        let shape = value.shape().to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor { shape, data }, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x);
        let data = value.data().iter().map(|&v| v + c).collect();
        let shape = value.shape().to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor { shape, data }, Op::AddScalar(x), rg)
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x);
        let data = value.data().iter().map(|&v| v.clamp(lo, hi)).collect();
        let shape = value.shape().to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor { shape, data }, Op::Clamp(x, lo, hi), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = self.value(x);
        let n = value.numel().max(1) as f64;
        let s: f64 = value.data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s / n), Op::Mean(x), rg)
    }

    /// Concatenates 2-D tensors with equal row counts along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Usage("concat of zero tensors".into()));
        };
        let rows = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat", self.shape(first), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor {
                shape: vec![rows, total],
                data,
            },
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(Error::shape("slice", s, &[start, end]));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![rows, end - start],
                data,
            },
            Op::Slice(x, start, end),
            rg,
        ))
    }

    /// Repeats a `[n]` or `[1, n]` tensor into `[rows, n]`.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let s = self.shape(x);
        let n = match s {
            [n] => *n,
            [1, n] => *n,
            _ => return Err(Error::shape("broadcast", s, &[rows])),
        };
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(src);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![rows, n],
                data,
            },
            Op::Broadcast(x),
            rg,
        ))
    }

    /// Selects rows of a 2-D tensor (indices may repeat).
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("gather_rows", s, &[indices.len()]));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Batching(format!(
                "row {bad} requested from a tensor with {rows} rows"
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![indices.len(), cols],
                data,
            },
            Op::GatherRows(x, indices.to_vec()),
            rg,
        ))
    }

    /// Back-propagates from a scalar `root`, accumulating into leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward from non-scalar of shape {:?}",
                root_value.shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let slot = |v: Var, grads: &mut Vec<Option<Vec<f64>>>| -> Option<usize> {
                if nodes[v.0].requires_grad {
                    if grads[v.0].is_none() {
                        grads[v.0] = Some(vec![0.0; nodes[v.0].value.numel()]);
                    }
                    Some(v.0)
                } else {
                    None
                }
            };
            match &node.op {
                Op::Leaf => leaf_grads.push((id, g)),
                Op::MatMul(a, b) => {
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if let Some(ia) = slot(*a, &mut grads) {
                        let ga = grads[ia].as_mut().unwrap();
                        // dA += G * B^T
                        gemm(
                            m,
                            n,
                            k,
                            &g,
                            Layout::Normal(n),
                            nodes[b.0].value.data(),
                            Layout::Transposed(n),
                            ga,
                        );
                    }
                    if let Some(ib) = slot(*b, &mut grads) {
                        let gb = grads[ib].as_mut().unwrap();
                        // dB += A^T * G
                        gemm(
                            k,
                            m,
                            n,
                            nodes[a.0].value.data(),
                            Layout::Transposed(k),
                            &g,
                            Layout::Normal(n),
                            gb,
                        );
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let sign_b = if matches!(node.op, Op::Sub(..)) {
                        -1.0
                    } else {
                        1.0
                    };
                    let is_mul = matches!(node.op, Op::Mul(..));
                    let va = nodes[a.0].value.data();
                    let vb = nodes[b.0].value.data();
                    if let Some(ia) = slot(a, &mut grads) {
                        let ga = grads[ia].as_mut().unwrap();
                        let na = ga.len();
                        for (i, gi) in g.iter().enumerate() {
                            let local = if is_mul { vb[i % vb.len()] } else { 1.0 };
                            ga[i % na] += gi * local;
                        }
                    }
                    if let Some(ib) = slot(b, &mut grads) {
                        let gb = grads[ib].as_mut().unwrap();
                        let nb = gb.len();
                        for (i, gi) in g.iter().enumerate() {
                            let local = if is_mul { va[i % va.len()] } else { sign_b };
                            gb[i % nb] += gi * local;
                        }
                    }
                }
                Op::Unary(u, x) => {
                    let (u, x) = (*u, *x);
                    let vx = nodes[x.0].value.data();
                    let vy = node.value.data();
                    if let Some(ix) = slot(x, &mut grads) {
                        let gx = grads[ix].as_mut().unwrap();
                        for i in 0..g.len() {
                            gx[i] += g[i] * u.derivative(vx[i], vy[i]);
                        }
                    }
                }
                Op::Scale(x, c) => {
                    if let Some(ix) = slot(*x, &mut grads) {
                        let gx = grads[ix].as_mut().unwrap();
                        for (d, gi) in gx.iter_mut().zip(&g) {
                            *d += gi * c;
                        }
                    }
                }
                Op::AddScalar(x) => {
                    if let Some(ix) = slot(*x, &mut grads) {
                        let gx = grads[ix].as_mut().unwrap();
                        for (d, gi) in gx.iter_mut().zip(&g) {
                            *d += gi;
                        }
                    }
                }
                Op::Clamp(x, lo, hi) => {
                    let vx = nodes[x.0].value.data();
                    if let Some(ix) = slot(*x, &mut grads) {
                        let gx = grads[ix].as_mut().unwrap();
                        for i in 0..g.len() {
                            if vx[i] >= *lo && vx[i] <= *hi {
                                gx[i] += g[i];
                            }
                        }
                    }
                }
                Op::Sum(x) | Op::Mean(x) => {
                    let scale = if matches!(node.op, Op::Mean(_)) {
                        1.0 / nodes[x.0].value.numel().max(1) as f64
                    } else {
                        1.0
                    };
                    if let Some(ix) = slot(*x, &mut grads) {
                        let gx = grads[ix].as_mut().unwrap();
                        let gi = g[0] * scale;
                        for d in gx.iter_mut() {
                            *d += gi;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let rows = node.value.shape()[0];
                    let total = node.value.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p.0].value.shape()[1];
                        if let Some(ip) = slot(p, &mut grads) {
                            let gp = grads[ip].as_mut().unwrap();
                            for r in 0..rows {
                                for c in 0..w {
                                    gp[r * w + c] += g[r * total + offset + c];
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::Slice(x, start, end) => {
                    let cols = nodes[x.0].value.shape()[1];
                    let w = end - start;
                    if let Some(ix) = slot(*x, &mut grads) {
                        let gx = grads[ix].as_mut().unwrap();
                        for (r, chunk) in g.chunks(w).enumerate() {
                            for (c, gi) in chunk.iter().enumerate() {
                                gx[r * cols + start + c] += gi;
                            }
                        }
                    }
                }
                Op::Broadcast(x) => {
                    if let Some(ix) = slot(*x, &mut grads) {
                        let gx = grads[ix].as_mut().unwrap();
                        let n = gx.len();
                        for chunk in g.chunks(n) {
                            for (d, gi) in gx.iter_mut().zip(chunk) {
                                *d += gi;
                            }
                        }
                    }
                }
                Op::GatherRows(x, indices) => {
                    let cols = nodes[x.0].value.shape()[1];
                    if let Some(ix) = slot(*x, &mut grads) {
                        let gx = grads[ix].as_mut().unwrap();
                        for (chunk, &i) in g.chunks(cols).zip(indices) {
                            for (d, gi) in gx[i * cols..(i + 1) * cols].iter_mut().zip(chunk) {
                                *d += gi;
                            }
                        }
                    }
                }
            }
        }

        for (id, g) in leaf_grads {
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => {
                    for (a, gi) in acc.data_mut().iter_mut().zip(&g) {
                        *a += gi;
                    }
                }
                None => {
                    node.grad = Some(Tensor {
                        shape: node.value.shape().to_vec(),
                        data: g,
                    })
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Layout {
    /// Row-major with the given row stride.
    Normal(usize),
    /// The transpose of a row-major matrix whose row stride is given.
    Transposed(usize),
}

impl Layout {
    fn strides(self) -> (isize, isize) {
        match self {
            Layout::Normal(rs) => (rs as isize, 1),
            Layout::Transposed(rs) => (1, rs as isize),
        }
    }
}

/// `c[m, n] += a[m, k] * b[k, n]` with `c` row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = la.strides();
    let (rsb, csb) = lb.strides();
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides describe row-major (or transposed row-major) views of them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
