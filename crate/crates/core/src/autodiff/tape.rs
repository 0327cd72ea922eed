use std::cell::{Cell, Ref, RefCell};

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    ScalarLeft,
    ScalarRight,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Scale(usize, f64),
    Shift(usize),
    AddRow(usize, usize),
    Relu(usize),
    Gelu(usize),
    Tanh(usize),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    GatherRows(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    Reshape(usize),
    SoftmaxCe(usize, Vec<usize>, Vec<f64>),
    Kl(usize, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Elementwise operation selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Relu,
    Gelu,
}

/// Wengert list for one forward/backward pass.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid reverse topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input. Gradients are tracked iff `tensor.requires_grad`.
    pub fn leaf(&self, tensor: Tensor) -> Var<'_> {
        let requires_grad = tensor.requires_grad;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a constant that never receives gradients.
    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.leaf(tensor.with_grad(false))
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Reverse sweep from a scalar `loss`. The tape can be swept only once.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::invalid("loss recorded on a different tape"));
        }
        if self.consumed.replace(true) {
            return Err(Error::invalid("tape already consumed by backward"));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", nodes[loss.id].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|g| Tensor::new(nodes[id].value.shape().to_vec(), g).expect("gradient matches value shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, delta: &[f64]) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

fn accumulate_scalar(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, delta: f64) {
    accumulate(grads, nodes, id, &[delta]);
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if nodes[*a].requires_grad {
                let mut da = vec![0.0; m * k];
                gemm_nt(g, bv.data(), &mut da, m, n, k);
                accumulate(grads, nodes, *a, &da);
            }
            if nodes[*b].requires_grad {
                let mut db = vec![0.0; k * n];
                gemm_tn(av.data(), g, &mut db, m, k, n);
                accumulate(grads, nodes, *b, &db);
            }
        }
        Op::MatMulT(a, b) => {
            // C[m×n] = A[m×k] · B[n×k]ᵀ
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.rows());
            if nodes[*a].requires_grad {
                let mut da = vec![0.0; m * k];
                gemm_nn(g, bv.data(), &mut da, m, n, k);
                accumulate(grads, nodes, *a, &da);
            }
            if nodes[*b].requires_grad {
                let mut db = vec![0.0; n * k];
                gemm_tn(g, av.data(), &mut db, m, n, k);
                accumulate(grads, nodes, *b, &db);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (node.value.rows(), node.value.cols());
            let mut da = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    da[j * r + i] = g[i * c + j];
                }
            }
            accumulate(grads, nodes, *a, &da);
        }
        Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            match bc {
                Bcast::Same => {
                    accumulate(grads, nodes, *a, g);
                    if nodes[*b].requires_grad {
                        let db: Vec<f64> = g.iter().map(|v| sign * v).collect();
                        accumulate(grads, nodes, *b, &db);
                    }
                }
                Bcast::ScalarLeft => {
                    accumulate_scalar(grads, nodes, *a, g.iter().sum());
                    if nodes[*b].requires_grad {
                        let db: Vec<f64> = g.iter().map(|v| sign * v).collect();
                        accumulate(grads, nodes, *b, &db);
                    }
                }
                Bcast::ScalarRight => {
                    accumulate(grads, nodes, *a, g);
                    accumulate_scalar(grads, nodes, *b, sign * g.iter().sum::<f64>());
                }
            }
        }
        Op::Mul(a, b, bc) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            match bc {
                Bcast::Same => {
                    if nodes[*a].requires_grad {
                        let da: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                        accumulate(grads, nodes, *a, &da);
                    }
                    if nodes[*b].requires_grad {
                        let db: Vec<f64> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                        accumulate(grads, nodes, *b, &db);
                    }
                }
                Bcast::ScalarLeft => {
                    let s = av[0];
                    let da: f64 = g.iter().zip(bv).map(|(g, b)| g * b).sum();
                    accumulate_scalar(grads, nodes, *a, da);
                    if nodes[*b].requires_grad {
                        let db: Vec<f64> = g.iter().map(|g| g * s).collect();
                        accumulate(grads, nodes, *b, &db);
                    }
                }
                Bcast::ScalarRight => {
                    let s = bv[0];
                    if nodes[*a].requires_grad {
                        let da: Vec<f64> = g.iter().map(|g| g * s).collect();
                        accumulate(grads, nodes, *a, &da);
                    }
                    let db: f64 = g.iter().zip(av).map(|(g, a)| g * a).sum();
                    accumulate_scalar(grads, nodes, *b, db);
                }
            }
        }
        Op::Scale(a, c) => {
            let da: Vec<f64> = g.iter().map(|v| v * c).collect();
            accumulate(grads, nodes, *a, &da);
        }
        Op::Shift(a) | Op::Reshape(a) => accumulate(grads, nodes, *a, g),
        Op::AddRow(a, row) => {
            accumulate(grads, nodes, *a, g);
            if nodes[*row].requires_grad {
                let n = node.value.cols();
                let mut dr = vec![0.0; n];
                for chunk in g.chunks(n) {
                    for (d, v) in dr.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                accumulate(grads, nodes, *row, &dr);
            }
        }
        Op::Relu(a) => {
            let x = nodes[*a].value.data();
            let da: Vec<f64> = g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
            accumulate(grads, nodes, *a, &da);
        }
        Op::Gelu(a) => {
            let x = nodes[*a].value.data();
            let da: Vec<f64> = g.iter().zip(x).map(|(g, x)| g * gelu_grad(*x)).collect();
            accumulate(grads, nodes, *a, &da);
        }
        Op::Tanh(a) => {
            let da: Vec<f64> = g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect();
            accumulate(grads, nodes, *a, &da);
        }
        Op::Sum(a) => {
            let n = nodes[*a].value.numel();
            accumulate(grads, nodes, *a, &vec![g[0]; n]);
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.numel();
            accumulate(grads, nodes, *a, &vec![g[0] / n as f64; n]);
        }
        Op::MeanRows(a) => {
            let av = &nodes[*a].value;
            let (m, n) = (av.rows(), av.cols());
            let mut da = vec![0.0; m * n];
            for row in da.chunks_mut(n) {
                for (d, v) in row.iter_mut().zip(g) {
                    *d = v / m as f64;
                }
            }
            accumulate(grads, nodes, *a, &da);
        }
        Op::SoftmaxRows(a) => {
            let n = node.value.cols();
            let mut da = vec![0.0; out.len()];
            for ((drow, grow), yrow) in da.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                    *d = y * (g - dot);
                }
            }
            accumulate(grads, nodes, *a, &da);
        }
        Op::LogSoftmaxRows(a) => {
            let n = node.value.cols();
            let mut da = vec![0.0; out.len()];
            for ((drow, grow), yrow) in da.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                let gs: f64 = grow.iter().sum();
                for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                    *d = g - y.exp() * gs;
                }
            }
            accumulate(grads, nodes, *a, &da);
        }
        Op::GatherRows(a, idx) => {
            let n = node.value.cols();
            let mut da = vec![0.0; nodes[*a].value.numel()];
            for (grow, &r) in g.chunks(n).zip(idx) {
                for (d, v) in da[r * n..(r + 1) * n].iter_mut().zip(grow) {
                    *d += v;
                }
            }
            accumulate(grads, nodes, *a, &da);
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.numel();
                accumulate(grads, nodes, p, &g[offset..offset + len]);
                offset += len;
            }
        }
        Op::SoftmaxCe(a, targets, probs) => {
            let c = nodes[*a].value.cols();
            let rows = targets.len() as f64;
            let mut da: Vec<f64> = probs.iter().map(|p| g[0] * p / rows).collect();
            for (r, &t) in targets.iter().enumerate() {
                da[r * c + t] -= g[0] / rows;
            }
            accumulate(grads, nodes, *a, &da);
        }
        Op::Kl(a, target) => {
            let rows = nodes[*a].value.rows() as f64;
            let da: Vec<f64> = target.iter().map(|p| -g[0] * p / rows).collect();
            accumulate(grads, nodes, *a, &da);
        }
    }
}

fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

fn bcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::Same)
    } else if a.numel() == 1 {
        Ok(Bcast::ScalarLeft)
    } else if b.numel() == 1 {
        Ok(Bcast::ScalarRight)
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn node(&self) -> Ref<'t, Node> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id])
    }

    fn check_same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::invalid("vars belong to different tapes"))
        }
    }

    pub fn value(&self) -> Tensor {
        self.node().value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().value.shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.node().value.rows()
    }

    pub fn cols(&self) -> usize {
        self.node().value.cols()
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> f64 {
        self.node().value.data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node().requires_grad
    }

    fn unary(&self, name: &'static str, f: impl FnOnce(&Tensor) -> Result<Tensor>, op: Op) -> Result<Var<'t>> {
        let (value, rg) = {
            let n = self.node();
            (f(&n.value)?, n.requires_grad)
        };
        self.tape.push(name, value, op, rg)
    }

    fn map(&self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'t>> {
        self.unary(
            name,
            |v| Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| f(*x)).collect()),
            op,
        )
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<(Tensor, Op)>,
    ) -> Result<Var<'t>> {
        self.check_same_tape(other)?;
        let (value, op, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (v, op) = f(&a.value, &b.value)?;
            (v, op, a.requires_grad || b.requires_grad)
        };
        self.tape.push(name, value, op, rg)
    }

    /// `self[m×k] · other[k×n]`
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (ai, bi) = (self.id, other.id);
        self.binary(other, "matmul", |a, b| {
            if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
                return Err(Error::shape("matmul", format!("{:?} · {:?}", a.shape(), b.shape())));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut out = vec![0.0; m * n];
            gemm_nn(a.data(), b.data(), &mut out, m, k, n);
            Ok((Tensor::matrix(m, n, out)?, Op::MatMul(ai, bi)))
        })
    }

    /// `self[m×k] · other[n×k]ᵀ`, the layout of a linear layer with an
    /// `out × in` weight.
    pub fn matmul_t(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (ai, bi) = (self.id, other.id);
        self.binary(other, "matmul_t", |a, b| {
            if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
                return Err(Error::shape("matmul_t", format!("{:?} · {:?}ᵀ", a.shape(), b.shape())));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.rows());
            let mut out = vec![0.0; m * n];
            gemm_nt(a.data(), b.data(), &mut out, m, k, n);
            Ok((Tensor::matrix(m, n, out)?, Op::MatMulT(ai, bi)))
        })
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        self.unary(
            "transpose",
            |v| {
                if v.shape().len() != 2 {
                    return Err(Error::shape("transpose", format!("{:?}", v.shape())));
                }
                Ok(v.transpose2())
            },
            Op::Transpose(self.id),
        )
    }

    fn arith(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: fn(f64, f64) -> f64,
        mk: fn(usize, usize, Bcast) -> Op,
    ) -> Result<Var<'t>> {
        let (ai, bi) = (self.id, other.id);
        self.binary(other, name, |a, b| {
            let bc = bcast(name, a, b)?;
            let (shape, data) = match bc {
                Bcast::Same => (
                    a.shape().to_vec(),
                    a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
                ),
                Bcast::ScalarLeft => {
                    let s = a.data()[0];
                    (b.shape().to_vec(), b.data().iter().map(|y| f(s, *y)).collect())
                }
                Bcast::ScalarRight => {
                    let s = b.data()[0];
                    (a.shape().to_vec(), a.data().iter().map(|x| f(*x, s)).collect())
                }
            };
            Ok((Tensor::new(shape, data)?, mk(ai, bi, bc)))
        })
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.arith(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.arith(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.arith(other, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.map("scale", |x| x * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.map("add_scalar", |x| x + c, Op::Shift(self.id))
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        let (ai, ri) = (self.id, row.id);
        self.binary(row, "add_row", |a, r| {
            if r.numel() != a.cols() {
                return Err(Error::shape(
                    "add_row",
                    format!("{:?} + row {:?}", a.shape(), r.shape()),
                ));
            }
            let n = a.cols();
            let mut data = a.data().to_vec();
            for chunk in data.chunks_mut(n) {
                for (d, v) in chunk.iter_mut().zip(r.data()) {
                    *d += v;
                }
            }
            Ok((Tensor::new(a.shape().to_vec(), data)?, Op::AddRow(ai, ri)))
        })
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.map("relu", |x| x.max(0.0), Op::Relu(self.id))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Var<'t>> {
        self.map("gelu", gelu, Op::Gelu(self.id))
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.map("tanh", f64::tanh, Op::Tanh(self.id))
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        self.unary("sum", |v| Ok(Tensor::scalar(v.sum())), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        self.unary(
            "mean",
            |v| Ok(Tensor::scalar(v.sum() / v.numel() as f64)),
            Op::Mean(self.id),
        )
    }

    /// Column means: `m×n -> 1×n`.
    pub fn mean_rows(&self) -> Result<Var<'t>> {
        self.unary(
            "mean_rows",
            |v| {
                let (m, n) = (v.rows(), v.cols());
                let mut out = vec![0.0; n];
                for row in v.data().chunks(n) {
                    for (o, x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                out.iter_mut().for_each(|o| *o /= m as f64);
                Tensor::matrix(1, n, out)
            },
            Op::MeanRows(self.id),
        )
    }

    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        self.unary(
            "softmax_rows",
            |v| {
                let n = v.cols();
                let mut out = vec![0.0; v.numel()];
                for (orow, row) in out.chunks_mut(n).zip(v.data().chunks(n)) {
                    log_softmax_row(row, orow);
                    orow.iter_mut().for_each(|o| *o = o.exp());
                }
                Tensor::new(v.shape().to_vec(), out)
            },
            Op::SoftmaxRows(self.id),
        )
    }

    pub fn log_softmax_rows(&self) -> Result<Var<'t>> {
        self.unary(
            "log_softmax_rows",
            |v| {
                let n = v.cols();
                let mut out = vec![0.0; v.numel()];
                for (orow, row) in out.chunks_mut(n).zip(v.data().chunks(n)) {
                    log_softmax_row(row, orow);
                }
                Tensor::new(v.shape().to_vec(), out)
            },
            Op::LogSoftmaxRows(self.id),
        )
    }

    /// Selects rows by index (embedding lookup); indices may repeat.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let idx = idx.to_vec();
        let id = self.id;
        let (value, rg) = {
            let n = self.node();
            let v = &n.value;
            let (rows, cols) = (v.rows(), v.cols());
            if idx.is_empty() {
                return Err(Error::shape("gather_rows", "empty index list"));
            }
            if let Some(bad) = idx.iter().find(|&&r| r >= rows) {
                return Err(Error::shape("gather_rows", format!("row {bad} of {rows}")));
            }
            let mut out = Vec::with_capacity(idx.len() * cols);
            for &r in &idx {
                out.extend_from_slice(&v.data()[r * cols..(r + 1) * cols]);
            }
            (Tensor::matrix(idx.len(), cols, out)?, n.requires_grad)
        };
        self.tape.push("gather_rows", value, Op::GatherRows(id, idx), rg)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary("reshape", |v| v.clone().reshaped(shape.to_vec()), Op::Reshape(self.id))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&self, targets: &[usize]) -> Result<Var<'t>> {
        let id = self.id;
        let (value, probs, rg) = {
            let n = self.node();
            let v = &n.value;
            let (rows, c) = (v.rows(), v.cols());
            if c < 2 {
                return Err(Error::invalid(format!(
                    "cross-entropy needs at least 2 classes, got {c}"
                )));
            }
            if targets.len() != rows {
                return Err(Error::shape(
                    "softmax_cross_entropy",
                    format!("{rows} rows, {} targets", targets.len()),
                ));
            }
            if let Some(t) = targets.iter().find(|&&t| t >= c) {
                return Err(Error::invalid(format!("target class {t} out of range 0..{c}")));
            }
            let mut logp = vec![0.0; v.numel()];
            let mut loss = 0.0;
            for (r, (lrow, row)) in logp.chunks_mut(c).zip(v.data().chunks(c)).enumerate() {
                log_softmax_row(row, lrow);
                loss -= lrow[targets[r]];
            }
            let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
            (Tensor::scalar(loss / rows as f64), probs, n.requires_grad)
        };
        self.tape.push(
            "softmax_cross_entropy",
            value,
            Op::SoftmaxCe(id, targets.to_vec(), probs),
            rg,
        )
    }

    /// Mean over rows of `Σ_j P_j (log P_j − log P̂_j)`, with `self` holding
    /// the predicted log-probabilities. Zero-probability targets contribute 0.
    pub fn kl_divergence(&self, target: &Tensor) -> Result<Var<'t>> {
        let id = self.id;
        let (value, rg) = {
            let n = self.node();
            let v = &n.value;
            if v.shape() != target.shape() {
                return Err(Error::shape(
                    "kl_divergence",
                    format!("{:?} vs {:?}", target.shape(), v.shape()),
                ));
            }
            if let Some(p) = target.data().iter().find(|p| **p < 0.0 || !p.is_finite()) {
                return Err(Error::invalid(format!("negative or non-finite target probability {p}")));
            }
            let c = v.cols();
            for row in target.data().chunks(c) {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid(format!("target row sums to {s}, expected 1")));
                }
            }
            let mut loss = 0.0;
            for (p, q) in target.data().iter().zip(v.data()) {
                if *p > 0.0 {
                    loss += p * (p.ln() - q);
                }
            }
            (Tensor::scalar(loss / v.rows() as f64), n.requires_grad)
        };
        self.tape
            .push("kl_divergence", value, Op::Kl(id, target.data().to_vec()), rg)
    }

    /// Mean of squared differences against a constant target.
    pub fn mse(&self, target: &Tensor) -> Result<Var<'t>> {
        let t = self.tape.constant(target.clone());
        let d = self.sub(&t)?;
        d.mul(&d)?.mean()
    }

    pub fn elementwise(&self, op: Elementwise, other: Option<&Var<'t>>) -> Result<Var<'t>> {
        let need = |o: Option<&Var<'t>>| {
            o.copied()
                .ok_or_else(|| Error::invalid(format!("{op:?} needs a second operand")))
        };
        match op {
            Elementwise::Add => self.add(&need(other)?),
            Elementwise::Mul => self.mul(&need(other)?),
            Elementwise::Relu => self.relu(),
            Elementwise::Gelu => self.gelu(),
        }
    }
}

/// Stacks matrices with equal column counts vertically.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
    let tape = first.tape;
    let (value, rg) = {
        let nodes = tape.nodes.borrow();
        let cols = nodes[first.id].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for p in parts {
            if !std::ptr::eq(p.tape, tape) {
                return Err(Error::invalid("vars belong to different tapes"));
            }
            let v = &nodes[p.id].value;
            if v.cols() != cols {
                return Err(Error::shape("concat_rows", format!("{} vs {cols} columns", v.cols())));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
            rg |= nodes[p.id].requires_grad;
        }
        (Tensor::matrix(rows, cols, data)?, rg)
    };
    tape.push(
        "concat_rows",
        value,
        Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
        rg,
    )
}
