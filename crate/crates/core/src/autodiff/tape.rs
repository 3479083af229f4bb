use std::cell::RefCell;

use super::tensor::{matmul_raw, Tensor};
use crate::error::{Error, Result};

/// How the operands of an elementwise binary op line up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
    /// Right operand is a single row repeated over every row of the left.
    RhsRow,
    LhsRow,
}

#[derive(Clone, Debug)]
enum Op {
    MatMul(usize, usize),
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Neg(usize),
    Scale(usize, f64),
    Shift(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Abs(usize),
    Square(usize),
    Softmax(usize),
    LogSumExp(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    Slice { src: usize, start: usize, len: usize },
    Pick { src: usize, cols: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Option<Op>,
    requires_grad: bool,
}

/// Wengert list for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the node order is already a
/// topological order and [`Tape::backward`] is a single reverse sweep. A node
/// records its operation only if some operand requires a gradient; everything
/// else is stored as a constant.
///
/// A tape is single-threaded. Build one per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
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

    /// Place a value on the tape. Gradient-tracking leaves are the variables
    /// that [`backward`](Self::backward) reports gradients for.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: None,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, op: Op, operands: &[usize]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = operands.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value,
            op: requires_grad.then_some(op),
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::NotOnTape);
        }
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(op) = &node.op {
                backprop_node(&nodes, op, &node.value, &g, &mut grads);
            }
            grads[id] = Some(g);
        }

        let shapes = nodes[..=root.id]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients {
            tape: self as *const Tape,
            grads,
            shapes,
        })
    }

    /// Gradient of `loss` with respect to the leaf `x`, all other leaves
    /// treated as constants of the pass.
    pub fn grad_wrt_input(&self, loss: Var<'_>, x: Var<'_>) -> Result<Tensor> {
        if !std::ptr::eq(x.tape, self) {
            return Err(Error::NotOnTape);
        }
        {
            let nodes = self.nodes.borrow();
            let node = &nodes[x.id];
            if node.op.is_some() || !node.requires_grad {
                return Err(Error::NotOnTape);
            }
        }
        Ok(self.backward(loss)?.wrt(x))
    }
}

/// Result of a backward pass.
pub struct Gradients {
    tape: *const Tape,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the root does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        let shape = match self.shapes.get(var.id) {
            Some(s) if std::ptr::eq(self.tape, var.tape) => s.clone(),
            _ => var.shape(),
        };
        match self.grads.get(var.id) {
            Some(Some(g)) if std::ptr::eq(self.tape, var.tape) => Tensor::new(shape, g.clone())
                .expect("gradient shape matches its node"),
            _ => Tensor::zeros(&shape),
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, contrib: Vec<f64>) {
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn reduce_to(mode_side: Side, mode: Broadcast, g: &[f64], cols: usize, numel: usize) -> Vec<f64> {
    let reduce_all = matches!(
        (mode_side, mode),
        (Side::Lhs, Broadcast::LhsScalar) | (Side::Rhs, Broadcast::RhsScalar)
    );
    let reduce_rows = matches!(
        (mode_side, mode),
        (Side::Lhs, Broadcast::LhsRow) | (Side::Rhs, Broadcast::RhsRow)
    );
    if reduce_all {
        vec![g.iter().sum()]
    } else if reduce_rows {
        let mut out = vec![0.0; cols];
        for chunk in g.chunks(cols) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        debug_assert_eq!(out.len(), numel);
        out
    } else {
        g.to_vec()
    }
}

#[derive(Clone, Copy)]
enum Side {
    Lhs,
    Rhs,
}

fn operand_at(mode: Broadcast, side: Side, data: &[f64], i: usize, cols: usize) -> f64 {
    match (side, mode) {
        (Side::Lhs, Broadcast::LhsScalar) | (Side::Rhs, Broadcast::RhsScalar) => data[0],
        (Side::Lhs, Broadcast::LhsRow) | (Side::Rhs, Broadcast::RhsRow) => data[i % cols],
        _ => data[i],
    }
}

fn backprop_node(nodes: &[Node], op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let needs = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| &nodes[i].value;
    match *op {
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if needs(a) {
                // dA = G Bᵀ
                let bt = bv.transpose();
                accumulate(grads, a, matmul_raw(g, bt.data(), m, n, k));
            }
            if needs(b) {
                // dB = Aᵀ G
                let at = av.transpose();
                accumulate(grads, b, matmul_raw(at.data(), g, k, m, n));
            }
        }
        Op::Add(a, b, mode) | Op::Sub(a, b, mode) => {
            let cols = out.cols();
            let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if needs(a) {
                accumulate(grads, a, reduce_to(Side::Lhs, mode, g, cols, val(a).numel()));
            }
            if needs(b) {
                let mut r = reduce_to(Side::Rhs, mode, g, cols, val(b).numel());
                if sign < 0.0 {
                    r.iter_mut().for_each(|v| *v = -*v);
                }
                accumulate(grads, b, r);
            }
        }
        Op::Mul(a, b, mode) => {
            let cols = out.cols();
            let (ad, bd) = (val(a).data(), val(b).data());
            if needs(a) {
                let full: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * operand_at(mode, Side::Rhs, bd, i, cols))
                    .collect();
                accumulate(grads, a, reduce_to(Side::Lhs, mode, &full, cols, ad.len()));
            }
            if needs(b) {
                let full: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * operand_at(mode, Side::Lhs, ad, i, cols))
                    .collect();
                accumulate(grads, b, reduce_to(Side::Rhs, mode, &full, cols, bd.len()));
            }
        }
        Op::Neg(a) => accumulate(grads, a, g.iter().map(|v| -v).collect()),
        Op::Scale(a, c) => accumulate(grads, a, g.iter().map(|v| v * c).collect()),
        Op::Shift(a) => accumulate(grads, a, g.to_vec()),
        Op::Relu(a) => {
            let x = val(a).data();
            accumulate(
                grads,
                a,
                g.iter()
                    .zip(x)
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                    .collect(),
            );
        }
        Op::Sigmoid(a) => accumulate(
            grads,
            a,
            g.iter()
                .zip(out.data())
                .map(|(gi, s)| gi * s * (1.0 - s))
                .collect(),
        ),
        Op::Exp(a) => accumulate(grads, a, g.iter().zip(out.data()).map(|(gi, e)| gi * e).collect()),
        Op::Ln(a) => accumulate(
            grads,
            a,
            g.iter().zip(val(a).data()).map(|(gi, x)| gi / x).collect(),
        ),
        Op::Sqrt(a) => accumulate(
            grads,
            a,
            g.iter()
                .zip(out.data())
                .map(|(gi, r)| if *r > 0.0 { gi / (2.0 * r) } else { 0.0 })
                .collect(),
        ),
        Op::Abs(a) => accumulate(
            grads,
            a,
            g.iter()
                .zip(val(a).data())
                .map(|(gi, x)| {
                    if *x > 0.0 {
                        *gi
                    } else if *x < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                })
                .collect(),
        ),
        Op::Square(a) => accumulate(
            grads,
            a,
            g.iter().zip(val(a).data()).map(|(gi, x)| 2.0 * x * gi).collect(),
        ),
        Op::Softmax(a) => {
            let cols = out.cols();
            let mut r = vec![0.0; g.len()];
            for ((gr, sr), rr) in g.chunks(cols).zip(out.data().chunks(cols)).zip(r.chunks_mut(cols)) {
                let dot: f64 = gr.iter().zip(sr).map(|(x, y)| x * y).sum();
                for ((o, gi), si) in rr.iter_mut().zip(gr).zip(sr) {
                    *o = si * (gi - dot);
                }
            }
            accumulate(grads, a, r);
        }
        Op::LogSumExp(a) => {
            let x = val(a);
            let cols = x.cols();
            let mut r = vec![0.0; x.numel()];
            for (row, (xr, rr)) in x.data().chunks(cols).zip(r.chunks_mut(cols)).enumerate() {
                let lse = out.data()[row];
                for (o, xi) in rr.iter_mut().zip(xr) {
                    *o = g[row] * (xi - lse).exp();
                }
            }
            accumulate(grads, a, r);
        }
        Op::Sum(a) => accumulate(grads, a, vec![g[0]; val(a).numel()]),
        Op::Mean(a) => {
            let n = val(a).numel();
            accumulate(grads, a, vec![g[0] / n as f64; n]);
        }
        Op::SumRows(a) => {
            let x = val(a);
            let cols = x.cols();
            let mut r = vec![0.0; x.numel()];
            for (row, rr) in r.chunks_mut(cols).enumerate() {
                rr.iter_mut().for_each(|v| *v = g[row]);
            }
            accumulate(grads, a, r);
        }
        Op::Slice { src, start, len } => {
            let x = val(src);
            let cols = x.cols();
            let mut r = vec![0.0; x.numel()];
            for (row, gr) in g.chunks(len).enumerate() {
                r[row * cols + start..row * cols + start + len].copy_from_slice(gr);
            }
            accumulate(grads, src, r);
        }
        Op::Pick { src, ref cols } => {
            let x = val(src);
            let width = x.cols();
            let mut r = vec![0.0; x.numel()];
            for (row, &c) in cols.iter().enumerate() {
                r[row * width + c] = g[row];
            }
            accumulate(grads, src, r);
        }
    }
}

fn broadcast_mode(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Broadcast> {
    let numel = |s: &[usize]| s.iter().product::<usize>();
    let is_scalar = |s: &[usize]| numel(s) == 1;
    let row_of = |row: &[usize], full: &[usize]| {
        full.len() == 2
            && ((row.len() == 1 && row[0] == full[1]) || (row.len() == 2 && row[0] == 1 && row[1] == full[1]))
    };
    if lhs == rhs {
        Ok(Broadcast::Same)
    } else if is_scalar(rhs) {
        Ok(Broadcast::RhsScalar)
    } else if is_scalar(lhs) {
        Ok(Broadcast::LhsScalar)
    } else if row_of(rhs, lhs) {
        Ok(Broadcast::RhsRow)
    } else if row_of(lhs, rhs) {
        Ok(Broadcast::LhsRow)
    } else {
        Err(Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        })
    }
}

fn row_softmax(x: &Tensor) -> Vec<f64> {
    let cols = x.cols();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(cols) {
        let lse = logsumexp_slice(row);
        out.extend(row.iter().map(|v| (v - lse).exp()));
    }
    out
}

fn logsumexp_slice(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Shape after reducing the last axis.
fn reduced_shape(shape: &[usize]) -> Vec<usize> {
    match shape.len() {
        0 | 1 => Vec::new(),
        n => shape[..n - 1].to_vec(),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_of(self.id).shape().to_vec()
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> f64 {
        let v = self.tape.value_of(self.id);
        debug_assert_eq!(v.numel(), 1);
        v.data()[0]
    }

    fn unary(self, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var<'t> {
        let out = f(&self.tape.value_of(self.id));
        self.tape.push(out, op, &[self.id])
    }

    fn elementwise(self, rhs: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Broadcast)> {
        let a = self.tape.value_of(self.id);
        let b = self.tape.value_of(rhs.id);
        let mode = broadcast_mode(name, a.shape(), b.shape())?;
        let shape = match mode {
            Broadcast::Same | Broadcast::RhsScalar | Broadcast::RhsRow => a.shape().to_vec(),
            Broadcast::LhsScalar | Broadcast::LhsRow => b.shape().to_vec(),
        };
        let n: usize = shape.iter().product();
        let cols = shape.last().copied().unwrap_or(1);
        let data = (0..n)
            .map(|i| {
                f(
                    operand_at(mode, Side::Lhs, a.data(), i, cols),
                    operand_at(mode, Side::Rhs, b.data(), i, cols),
                )
            })
            .collect();
        Ok((Tensor::new(shape, data)?, mode))
    }

    /// `[m, k] × [k, n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let out = self.tape.value_of(self.id).matmul(&self.tape.value_of(rhs.id))?;
        Ok(self.tape.push(out, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id]))
    }

    /// Elementwise sum. Shapes must match, or one side is a scalar, or one
    /// side is a single row matching the other's columns.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (out, mode) = self.elementwise(rhs, "add", |a, b| a + b)?;
        Ok(self.tape.push(out, Op::Add(self.id, rhs.id, mode), &[self.id, rhs.id]))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (out, mode) = self.elementwise(rhs, "sub", |a, b| a - b)?;
        Ok(self.tape.push(out, Op::Sub(self.id, rhs.id, mode), &[self.id, rhs.id]))
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (out, mode) = self.elementwise(rhs, "mul", |a, b| a * b)?;
        Ok(self.tape.push(out, Op::Mul(self.id, rhs.id, mode), &[self.id, rhs.id]))
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |x| x.map(|v| -v))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| x.map(|v| v * c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::Shift(self.id), |x| x.map(|v| v + c))
    }

    /// `max(0, x)`; the subgradient at zero is zero.
    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.map(|v| v.max(0.0)))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |x| x.map(sigmoid))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |x| x.map(f64::exp))
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Ln(self.id), |x| x.map(f64::ln))
    }

    /// Square root; the gradient at zero is taken as zero.
    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), |x| x.map(f64::sqrt))
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.id), |x| x.map(f64::abs))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |x| x.map(|v| v * v))
    }

    /// Softmax over the last axis, computed through logsumexp.
    pub fn softmax(self) -> Var<'t> {
        self.unary(Op::Softmax(self.id), |x| {
            Tensor::new(x.shape().to_vec(), row_softmax(x)).expect("same shape")
        })
    }

    /// Log-sum-exp over the last axis; `[m, n] -> [m]`, `[n] -> []`.
    pub fn logsumexp(self) -> Var<'t> {
        self.unary(Op::LogSumExp(self.id), |x| {
            let data = x.data().chunks(x.cols()).map(logsumexp_slice).collect();
            Tensor::new(reduced_shape(x.shape()), data).expect("reduced shape")
        })
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |x| Tensor::scalar(x.data().iter().sum()))
    }

    pub fn mean(self) -> Var<'t> {
        self.unary(Op::Mean(self.id), |x| {
            Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64)
        })
    }

    /// Sum over the last axis; `[m, n] -> [m]`.
    pub fn sum_rows(self) -> Var<'t> {
        self.unary(Op::SumRows(self.id), |x| {
            let data = x.data().chunks(x.cols()).map(|r| r.iter().sum()).collect();
            Tensor::new(reduced_shape(x.shape()), data).expect("reduced shape")
        })
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice(self, start: usize, len: usize) -> Result<Var<'t>> {
        let out = {
            let x = self.tape.value_of(self.id);
            let cols = x.cols();
            if start + len > cols || x.shape().is_empty() {
                return Err(Error::Shape {
                    op: "slice",
                    lhs: x.shape().to_vec(),
                    rhs: vec![start, len],
                });
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().expect("non-scalar") = len;
            let data = x
                .data()
                .chunks(cols)
                .flat_map(|r| r[start..start + len].iter().copied())
                .collect();
            Tensor::new(shape, data)?
        };
        Ok(self.tape.push(out, Op::Slice { src: self.id, start, len }, &[self.id]))
    }

    /// One entry per row: `out[i] = x[i, cols[i]]`, shape `[m]`.
    pub fn pick(self, cols: &[usize]) -> Result<Var<'t>> {
        let out = {
            let x = self.tape.value_of(self.id);
            let width = x.cols();
            if cols.len() != x.rows() || x.shape().is_empty() {
                return Err(Error::Shape {
                    op: "pick",
                    lhs: x.shape().to_vec(),
                    rhs: vec![cols.len()],
                });
            }
            if let Some(&bad) = cols.iter().find(|&&c| c >= width) {
                return Err(Error::Index {
                    what: "pick column",
                    index: bad,
                    size: width,
                });
            }
            let data = cols.iter().enumerate().map(|(r, &c)| x.data()[r * width + c]).collect();
            Tensor::vector(data)
        };
        Ok(self.tape.push(
            out,
            Op::Pick {
                src: self.id,
                cols: cols.to_vec(),
            },
            &[self.id],
        ))
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        assert_eq!(x.softmax().value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let v = tape.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        assert_eq!(i.matmul(v).unwrap().value().data(), &[3.0, 4.0]);
    }

    #[test]
    fn square_derivative() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(3.0));
        let y = x.square();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item().unwrap(), 6.0);
    }

    #[test]
    fn relu_derivative_negative_and_zero() {
        for (at, expected) in [(-1.0, 0.0), (0.0, 0.0), (2.0, 1.0)] {
            let tape = Tape::new();
            let x = tape.var(Tensor::scalar(at));
            let g = tape.backward(x.relu()).unwrap();
            assert_eq!(g.wrt(x).item().unwrap(), expected);
        }
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x.square()), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.var(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.wrt(y), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn shape_error_names_op_and_shapes() {
        let tape = Tape::new();
        let a = tape.var(Tensor::zeros(&[2, 3]));
        let b = tape.var(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = tape.var(Tensor::zeros(&[4]));
        let err = a.add(c).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[4]"), "{err}");
    }

    #[test]
    fn grad_wrt_input_examples() {
        let tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let g = tape.grad_wrt_input(x.sum(), x).unwrap();
        assert_eq!(g.data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let half_sq = x.square().sum().scale(0.5);
        let g = tape.grad_wrt_input(half_sq, x).unwrap();
        assert_eq!(g.data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn grad_wrt_input_rejects_constants_and_foreign_vars() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0]));
        let y = tape.var(Tensor::vector(vec![1.0]));
        let loss = c.mul(y).unwrap().sum();
        assert!(matches!(tape.grad_wrt_input(loss, c), Err(Error::NotOnTape)));

        let other = Tape::new();
        let z = other.var(Tensor::vector(vec![1.0]));
        assert!(matches!(tape.grad_wrt_input(loss, z), Err(Error::NotOnTape)));
    }

    #[test]
    fn constants_are_not_recorded() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = a.square();
        assert!(tape.nodes.borrow()[b.id].op.is_none());
    }

    #[test]
    fn row_bias_broadcast() {
        let tape = Tape::new();
        let x = tape.var(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.var(Tensor::vector(vec![10.0, 20.0]));
        let y = x.add(b).unwrap();
        assert_eq!(y.value().data(), &[11.0, 22.0, 13.0, 24.0]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.wrt(b).data(), &[2.0, 2.0]);
    }
}
