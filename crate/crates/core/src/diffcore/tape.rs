use std::borrow::Cow;

use super::gemm::{gemm, Layout};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Elementwise primitive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    /// Negative-side slope; the derivative at exactly 0 is taken from the positive side.
    LeakyRelu(f64),
    Softplus,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Negate,
    Square,
}

impl Unary {
    /// Leaky ReLU with the default negative slope of 0.2.
    pub const LEAKY_RELU: Unary = Unary::LeakyRelu(0.2);

    fn name(self) -> &'static str {
        match self {
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Softplus => "softplus",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Negate => "negate",
            Unary::Square => "square",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::LeakyRelu(s) => {
                if x >= 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Unary::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Negate => -x,
            Unary::Square => x * x,
        }
    }

    /// dy/dx given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::LeakyRelu(s) => {
                if x >= 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Negate => -1.0,
            Unary::Square => 2.0 * x,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Unary { kind: Unary, a: usize },
    Binary { kind: Binary, a: usize, b: usize },
    AddRow { a: usize, row: usize },
    MulRow { a: usize, row: usize },
    SubCol { a: usize, col: usize },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    RowSum { a: usize },
    LogSumExp { a: usize },
    Pick { a: usize, idx: Vec<usize> },
    RowNorm { a: usize },
    BatchNorm { a: usize, inv_std: Vec<f64> },
}

#[derive(Debug)]
struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run record of primitive operations.
///
/// Leaves may borrow parameter storage for the lifetime `'a`, so several
/// tapes can read the same model concurrently. Build a fresh tape per
/// forward pass.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `t.grad`. Unreached leaves contribute zeros.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.wrt(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![0.0; t.numel()]),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [n, m] => Some((*n, *m)),
        _ => None,
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; len])
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, rg: bool, op: Op) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            requires_grad: rg,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("tape nodes keep shape and data congruent")
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let val = self.value(v);
        if val.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape(v)
            )));
        }
        Ok(val[0])
    }

    /// Borrows a tensor as a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Borrows a tensor as a constant regardless of its `requires_grad` flag.
    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), false, Op::Leaf)
    }

    /// Moves an owned tensor onto the tape.
    pub fn input(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), rg, Op::Leaf)
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.input(t))
    }

    /// `a (m x k) · b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a (m x k) · bᵀ` with `b` stored as `n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (m, k) = as_matrix(sa).ok_or_else(|| Error::dim(op, sa, sb))?;
        let (n, kb) = match (as_matrix(sb), trans_b) {
            (Some((r, c)), true) => (r, c),
            (Some((r, c)), false) => (c, r),
            (None, _) => return Err(Error::dim(op, sa, sb)),
        };
        if k != kb {
            return Err(Error::dim(op, sa, sb));
        }
        let mut out = vec![0.0; m * n];
        let lb = if trans_b {
            Layout::transposed(k, n)
        } else {
            Layout::row_major(k, n)
        };
        gemm(
            m,
            k,
            n,
            self.value(a),
            Layout::row_major(m, k),
            self.value(b),
            lb,
            &mut out,
            0.0,
        );
        check_finite(op, &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], Cow::Owned(out), rg, Op::MatMul { a: a.0, b: b.0, trans_b }))
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        if kind == Unary::Log {
            if let Some(bad) = x.iter().find(|v| **v <= 0.0 || v.is_nan()) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("nonpositive input {bad}"),
                });
            }
        }
        let out: Vec<f64> = x.iter().map(|&v| kind.apply(v)).collect();
        check_finite(kind.name(), &out)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, Cow::Owned(out), rg, Op::Unary { kind, a: a.0 }))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(name, self.shape(a), self.shape(b)));
        }
        let (x, y) = (self.value(a), self.value(b));
        if kind == Binary::Div && y.contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let out: Vec<f64> = x
            .iter()
            .zip(y)
            .map(|(&p, &q)| match kind {
                Binary::Add => p + q,
                Binary::Sub => p - q,
                Binary::Mul => p * q,
                Binary::Div => p / q,
            })
            .collect();
        check_finite(name, &out)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, Cow::Owned(out), rg, Op::Binary { kind, a: a.0, b: b.0 }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn row_broadcast_dims(&self, op: &'static str, a: Var, row: Var) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sr = self.shape(row);
        match (as_matrix(sa), sr) {
            (Some((n, m)), [r]) if *r == m => Ok((n, m)),
            _ => Err(Error::dim(op, sa, sr)),
        }
    }

    /// `a[i, j] + row[j]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = self.row_broadcast_dims("add_row", a, row)?;
        let (x, r) = (self.value(a), self.value(row));
        let mut out = x.to_vec();
        for i in 0..n {
            for (o, b) in out[i * m..(i + 1) * m].iter_mut().zip(r) {
                *o += b;
            }
        }
        check_finite("add_row", &out)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(vec![n, m], Cow::Owned(out), rg, Op::AddRow { a: a.0, row: row.0 }))
    }

    /// `a[i, j] * row[j]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = self.row_broadcast_dims("mul_row", a, row)?;
        let (x, r) = (self.value(a), self.value(row));
        let mut out = x.to_vec();
        for i in 0..n {
            for (o, b) in out[i * m..(i + 1) * m].iter_mut().zip(r) {
                *o *= b;
            }
        }
        check_finite("mul_row", &out)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(vec![n, m], Cow::Owned(out), rg, Op::MulRow { a: a.0, row: row.0 }))
    }

    /// `a[i, j] - col[i]`.
    pub fn sub_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sc = self.shape(col);
        let (n, m) = match (as_matrix(sa), sc) {
            (Some((n, m)), [c]) if *c == n => (n, m),
            _ => return Err(Error::dim("sub_col", sa, sc)),
        };
        let (x, c) = (self.value(a), self.value(col));
        let mut out = x.to_vec();
        for i in 0..n {
            for o in &mut out[i * m..(i + 1) * m] {
                *o -= c[i];
            }
        }
        check_finite("sub_col", &out)?;
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(vec![n, m], Cow::Owned(out), rg, Op::SubCol { a: a.0, col: col.0 }))
    }

    /// `c * a` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|v| c * v).collect();
        check_finite("scale", &out)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, Cow::Owned(out), rg, Op::Scale { a: a.0, c }))
    }

    /// `a + c` for a constant `c`.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|v| v + c).collect();
        check_finite("add_scalar", &out)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, Cow::Owned(out), rg, Op::AddScalar { a: a.0 }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).iter().sum();
        check_finite("sum", &[s])?;
        let rg = self.rg(a);
        Ok(self.push(Vec::new(), Cow::Owned(vec![s]), rg, Op::Sum { a: a.0 }))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = x.iter().sum::<f64>() / x.len() as f64;
        check_finite("mean", &[s])?;
        let rg = self.rg(a);
        Ok(self.push(Vec::new(), Cow::Owned(vec![s]), rg, Op::Mean { a: a.0 }))
    }

    /// Per-row sum of an `n x m` matrix.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        let (n, m) = as_matrix(sa).ok_or_else(|| Error::dim("row_sum", sa, &[]))?;
        let x = self.value(a);
        let out: Vec<f64> = (0..n).map(|i| x[i * m..(i + 1) * m].iter().sum()).collect();
        check_finite("row_sum", &out)?;
        let rg = self.rg(a);
        Ok(self.push(vec![n], Cow::Owned(out), rg, Op::RowSum { a: a.0 }))
    }

    /// Max-shifted `log Σ_j exp(a[i, j])` per row.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        let (n, k) = as_matrix(sa).ok_or_else(|| Error::dim("logsumexp", sa, &[]))?;
        if k == 0 {
            return Err(Error::dim("logsumexp", sa, &[1]));
        }
        let x = self.value(a);
        let out: Vec<f64> = (0..n).map(|i| logsumexp_row(&x[i * k..(i + 1) * k])).collect();
        check_finite("logsumexp", &out)?;
        let rg = self.rg(a);
        Ok(self.push(vec![n], Cow::Owned(out), rg, Op::LogSumExp { a: a.0 }))
    }

    /// Row-wise log-softmax, built from `logsumexp` and `sub_col`.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let lse = self.logsumexp(a)?;
        self.sub_col(a, lse)
    }

    /// `a[i, idx[i]]` for an `n x k` matrix.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        let (n, k) = as_matrix(sa).ok_or_else(|| Error::dim("pick", sa, &[idx.len()]))?;
        if idx.len() != n {
            return Err(Error::dim("pick", sa, &[idx.len()]));
        }
        if let Some(bad) = idx.iter().find(|&&j| j >= k) {
            return Err(Error::Domain {
                op: "pick",
                detail: format!("column {bad} out of range for width {k}"),
            });
        }
        let x = self.value(a);
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| x[i * k + j]).collect();
        let rg = self.rg(a);
        Ok(self.push(
            vec![n],
            Cow::Owned(out),
            rg,
            Op::Pick {
                a: a.0,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Euclidean norm of each row of an `n x m` matrix.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        let (n, m) = as_matrix(sa).ok_or_else(|| Error::dim("row_norm", sa, &[]))?;
        let x = self.value(a);
        let out: Vec<f64> = (0..n)
            .map(|i| x[i * m..(i + 1) * m].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        if out.contains(&0.0) {
            return Err(Error::Domain {
                op: "row_norm",
                detail: "zero-norm row".into(),
            });
        }
        check_finite("row_norm", &out)?;
        let rg = self.rg(a);
        Ok(self.push(vec![n], Cow::Owned(out), rg, Op::RowNorm { a: a.0 }))
    }

    /// Standardizes each column of `a` with its batch mean and biased variance.
    /// Returns the normalized value together with the batch mean and variance.
    pub fn batch_norm(&mut self, a: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let sa = self.shape(a);
        let (n, m) = as_matrix(sa).ok_or_else(|| Error::dim("batch_norm", sa, &[]))?;
        if n == 0 {
            return Err(Error::Contract("batch_norm on an empty batch".into()));
        }
        let x = self.value(a);
        let mut mean = vec![0.0; m];
        for i in 0..n {
            for (mu, v) in mean.iter_mut().zip(&x[i * m..(i + 1) * m]) {
                *mu += v;
            }
        }
        mean.iter_mut().for_each(|mu| *mu /= n as f64);
        let mut var = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                let d = x[i * m + j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = (x[i * m + j] - mean[j]) * inv_std[j];
            }
        }
        check_finite("batch_norm", &out)?;
        let rg = self.rg(a);
        let v = self.push(vec![n, m], Cow::Owned(out), rg, Op::BatchNorm { a: a.0, inv_std });
        Ok((v, mean, var))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 || !self.shape(loss).iter().all(|&d| d == 1) {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Only differentiable leaves keep their gradients; intermediates are scratch.
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |i: usize| -> &[f64] { &self.nodes[i].value };
        let rg = |i: usize| self.nodes[i].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (m, k) = as_matrix(&self.nodes[a].shape).unwrap();
                let n = node.shape[1];
                if rg(a) {
                    // ga (m x k) += g (m x n) · B' where B' is bᵀ (n x k) or b itself when trans_b
                    let lb = if trans_b {
                        Layout::row_major(n, k)
                    } else {
                        Layout::transposed(n, k)
                    };
                    let ga = add_into(&mut grads[a], m * k);
                    gemm(m, n, k, g, Layout::row_major(m, n), val(b), lb, ga, 1.0);
                }
                if rg(b) {
                    if trans_b {
                        // gb (n x k) += gᵀ (n x m) · a (m x k)
                        let gb = add_into(&mut grads[b], n * k);
                        gemm(
                            n,
                            m,
                            k,
                            g,
                            Layout::transposed(n, m),
                            val(a),
                            Layout::row_major(m, k),
                            gb,
                            1.0,
                        );
                    } else {
                        // gb (k x n) += aᵀ (k x m) · g (m x n)
                        let gb = add_into(&mut grads[b], k * n);
                        gemm(
                            k,
                            m,
                            n,
                            val(a),
                            Layout::transposed(k, m),
                            g,
                            Layout::row_major(m, n),
                            gb,
                            1.0,
                        );
                    }
                }
            }
            &Op::Unary { kind, a } => {
                if rg(a) {
                    let x = val(a);
                    let y = &node.value;
                    let ga = add_into(&mut grads[a], x.len());
                    for i in 0..x.len() {
                        ga[i] += g[i] * kind.derivative(x[i], y[i]);
                    }
                }
            }
            &Op::Binary { kind, a, b } => {
                let (x, y) = (val(a), val(b));
                if rg(a) {
                    let ga = add_into(&mut grads[a], x.len());
                    for i in 0..x.len() {
                        ga[i] += match kind {
                            Binary::Add | Binary::Sub => g[i],
                            Binary::Mul => g[i] * y[i],
                            Binary::Div => g[i] / y[i],
                        };
                    }
                }
                if rg(b) {
                    let gb = add_into(&mut grads[b], y.len());
                    for i in 0..y.len() {
                        gb[i] += match kind {
                            Binary::Add => g[i],
                            Binary::Sub => -g[i],
                            Binary::Mul => g[i] * x[i],
                            Binary::Div => -g[i] * x[i] / (y[i] * y[i]),
                        };
                    }
                }
            }
            &Op::AddRow { a, row } => {
                let (n, m) = (node.shape[0], node.shape[1]);
                if rg(a) {
                    let ga = add_into(&mut grads[a], n * m);
                    ga.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
                if rg(row) {
                    let gr = add_into(&mut grads[row], m);
                    for i in 0..n {
                        for j in 0..m {
                            gr[j] += g[i * m + j];
                        }
                    }
                }
            }
            &Op::MulRow { a, row } => {
                let (n, m) = (node.shape[0], node.shape[1]);
                let (x, r) = (val(a), val(row));
                if rg(a) {
                    let ga = add_into(&mut grads[a], n * m);
                    for i in 0..n {
                        for j in 0..m {
                            ga[i * m + j] += g[i * m + j] * r[j];
                        }
                    }
                }
                if rg(row) {
                    let gr = add_into(&mut grads[row], m);
                    for i in 0..n {
                        for j in 0..m {
                            gr[j] += g[i * m + j] * x[i * m + j];
                        }
                    }
                }
            }
            &Op::SubCol { a, col } => {
                let (n, m) = (node.shape[0], node.shape[1]);
                if rg(a) {
                    let ga = add_into(&mut grads[a], n * m);
                    ga.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
                if rg(col) {
                    let gc = add_into(&mut grads[col], n);
                    for i in 0..n {
                        gc[i] -= g[i * m..(i + 1) * m].iter().sum::<f64>();
                    }
                }
            }
            &Op::Scale { a, c } => {
                if rg(a) {
                    let ga = add_into(&mut grads[a], g.len());
                    ga.iter_mut().zip(g).for_each(|(p, q)| *p += c * q);
                }
            }
            &Op::AddScalar { a } => {
                if rg(a) {
                    let ga = add_into(&mut grads[a], g.len());
                    ga.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
            }
            &Op::Sum { a } => {
                if rg(a) {
                    let len = val(a).len();
                    let ga = add_into(&mut grads[a], len);
                    ga.iter_mut().for_each(|p| *p += g[0]);
                }
            }
            &Op::Mean { a } => {
                if rg(a) {
                    let len = val(a).len();
                    let w = g[0] / len as f64;
                    let ga = add_into(&mut grads[a], len);
                    ga.iter_mut().for_each(|p| *p += w);
                }
            }
            &Op::RowSum { a } => {
                if rg(a) {
                    let (n, m) = as_matrix(&self.nodes[a].shape).unwrap();
                    let ga = add_into(&mut grads[a], n * m);
                    for i in 0..n {
                        ga[i * m..(i + 1) * m].iter_mut().for_each(|p| *p += g[i]);
                    }
                }
            }
            &Op::LogSumExp { a } => {
                if rg(a) {
                    let (n, k) = as_matrix(&self.nodes[a].shape).unwrap();
                    let x = val(a);
                    let lse = &node.value;
                    let ga = add_into(&mut grads[a], n * k);
                    for i in 0..n {
                        for j in 0..k {
                            ga[i * k + j] += g[i] * (x[i * k + j] - lse[i]).exp();
                        }
                    }
                }
            }
            Op::Pick { a, idx } => {
                let a = *a;
                if rg(a) {
                    let (n, k) = as_matrix(&self.nodes[a].shape).unwrap();
                    let ga = add_into(&mut grads[a], n * k);
                    for (i, &j) in idx.iter().enumerate() {
                        ga[i * k + j] += g[i];
                    }
                }
            }
            &Op::RowNorm { a } => {
                if rg(a) {
                    let (n, m) = as_matrix(&self.nodes[a].shape).unwrap();
                    let x = val(a);
                    let norms = &node.value;
                    let ga = add_into(&mut grads[a], n * m);
                    for i in 0..n {
                        let w = g[i] / norms[i];
                        for j in 0..m {
                            ga[i * m + j] += w * x[i * m + j];
                        }
                    }
                }
            }
            Op::BatchNorm { a, inv_std } => {
                let a = *a;
                if rg(a) {
                    let (n, m) = (node.shape[0], node.shape[1]);
                    let xhat = &node.value;
                    let mut sum_g = vec![0.0; m];
                    let mut sum_gx = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            sum_g[j] += g[i * m + j];
                            sum_gx[j] += g[i * m + j] * xhat[i * m + j];
                        }
                    }
                    let nf = n as f64;
                    let ga = add_into(&mut grads[a], n * m);
                    for i in 0..n {
                        for j in 0..m {
                            let t = nf * g[i * m + j] - sum_g[j] - xhat[i * m + j] * sum_gx[j];
                            ga[i * m + j] += inv_std[j] * t / nf;
                        }
                    }
                }
            }
        }
    }
}

/// Max-shifted log-sum-exp of a slice.
pub fn logsumexp_row(x: &[f64]) -> f64 {
    let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + x.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}
