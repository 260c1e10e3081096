//! Reverse-mode differentiation over [`DenseMatrix`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Calling
//! [`Tape::backward`] on a 1×1 result walks the record in reverse and returns
//! the adjoint of every node that depends on a trainable leaf.
//!
//! Elementwise binary operations broadcast a `1×1`, `N×1` or `1×M` operand
//! against the other one. Shape violations inside the tape are programming
//! errors and panic; public domain functions validate shapes first and return
//! [`crate::Error`].

use std::cell::RefCell;
use std::fmt;
use std::ops;
use std::rc::Rc;

use super::matrix::{matmul_a_bt, matmul_at_b, matmul_kernel, DenseMatrix};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Abs(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Clamp(usize, f64, f64),
    RowSoftmax(usize),
    RowLogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    ColSum(usize),
    SelectRows(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
}

struct Node {
    value: Rc<DenseMatrix>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass.
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

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let value = self.value();
        write!(f, "Var#{} {}x{}", self.id, value.rows(), value.cols())
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> DenseMatrix {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.id];
                DenseMatrix::zeros(r, c)
            }
        }
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

    /// Trainable leaf: gradients are tracked through it.
    pub fn param(&self, value: DenseMatrix) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&self, value: DenseMatrix) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that is trainable or constant depending on `trainable`.
    pub fn leaf(&self, value: DenseMatrix, trainable: bool) -> Var<'_> {
        self.push(value, Op::Leaf, trainable)
    }

    fn push(&self, value: DenseMatrix, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<DenseMatrix> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn unary(&self, a: usize, op: Op, f: impl FnOnce(&DenseMatrix) -> DenseMatrix) -> Var<'_> {
        let value = f(&self.value_of(a));
        self.push(value, op, self.requires(a))
    }

    fn binary(&self, a: usize, b: usize, op: Op, value: DenseMatrix) -> Var<'_> {
        let rg = self.requires(a) || self.requires(b);
        self.push(value, op, rg)
    }

    /// Reverse sweep from a 1×1 `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        assert!(
            std::ptr::eq(loss.tape, self),
            "loss recorded on another tape"
        );
        let nodes = self.nodes.borrow();
        let shapes: Vec<_> = nodes.iter().map(|n| n.value.shape()).collect();
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; nodes.len()];
        assert_eq!(shapes[loss.id], (1, 1), "backward needs a scalar loss");
        grads[loss.id] = Some(DenseMatrix::scalar(1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let y = &node.value;
            let val = |i: usize| &nodes[i].value;
            let mut send = |i: usize, d: DenseMatrix| {
                if !nodes[i].requires_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(d.data()) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if nodes[*a].requires_grad {
                        send(*a, matmul_a_bt(&g, val(*b)));
                    }
                    if nodes[*b].requires_grad {
                        send(*b, matmul_at_b(val(*a), &g));
                    }
                }
                Op::Transpose(a) => send(*a, g.transpose()),
                Op::Add(a, b) => {
                    send(*a, reduce_to(&g, val(*a).shape()));
                    send(*b, reduce_to(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    send(*a, reduce_to(&g, val(*a).shape()));
                    send(*b, reduce_to(&g.scale(-1.0), val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        send(
                            *a,
                            reduce_to(&broadcast_zip(&g, bv, |g, b| g * b), av.shape()),
                        );
                    }
                    if nodes[*b].requires_grad {
                        send(
                            *b,
                            reduce_to(&broadcast_zip(&g, av, |g, a| g * a), bv.shape()),
                        );
                    }
                }
                Op::Div(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        send(
                            *a,
                            reduce_to(&broadcast_zip(&g, bv, |g, b| g / b), av.shape()),
                        );
                    }
                    if nodes[*b].requires_grad {
                        // d(a/b)/db = -(a/b)/b = -y/b
                        let gy = g.hadamard(y).expect("same shape");
                        let d = broadcast_zip(&gy, bv, |gy, b| -gy / b);
                        send(*b, reduce_to(&d, bv.shape()));
                    }
                }
                Op::Scale(a, k) => send(*a, g.scale(*k)),
                Op::Offset(a) => send(*a, g),
                Op::Exp(a) => send(*a, g.hadamard(y).expect("same shape")),
                Op::Log(a) => send(*a, zip(&g, val(*a), |g, x| g / x)),
                Op::Sqrt(a) => send(*a, zip(&g, y, |g, y| g / (2.0 * y))),
                Op::Abs(a) => send(*a, zip(&g, val(*a), |g, x| g * sign(x))),
                Op::Relu(a) => send(*a, zip(&g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 })),
                Op::Tanh(a) => send(*a, zip(&g, y, |g, y| g * (1.0 - y * y))),
                Op::Sigmoid(a) => send(*a, zip(&g, y, |g, y| g * y * (1.0 - y))),
                Op::Clamp(a, lo, hi) => send(
                    *a,
                    zip(&g, val(*a), |g, x| if x > *lo && x < *hi { g } else { 0.0 }),
                ),
                Op::RowSoftmax(a) => {
                    let mut d = g.data().to_vec();
                    let cols = y.cols();
                    for (d_row, y_row) in d.chunks_mut(cols).zip(y.data().chunks(cols)) {
                        let dot: f64 = d_row.iter().zip(y_row).map(|(g, y)| g * y).sum();
                        for (dv, yv) in d_row.iter_mut().zip(y_row) {
                            *dv = yv * (*dv - dot);
                        }
                    }
                    send(*a, DenseMatrix::from_vec_unchecked(y.rows(), cols, d));
                }
                Op::RowLogSoftmax(a) => {
                    let mut d = g.data().to_vec();
                    let cols = y.cols();
                    for (d_row, y_row) in d.chunks_mut(cols).zip(y.data().chunks(cols)) {
                        let total: f64 = d_row.iter().sum();
                        for (dv, ly) in d_row.iter_mut().zip(y_row) {
                            *dv -= ly.exp() * total;
                        }
                    }
                    send(*a, DenseMatrix::from_vec_unchecked(y.rows(), cols, d));
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    send(*a, DenseMatrix::filled(r, c, g.get(0, 0)));
                }
                Op::Mean(a) => {
                    let (r, c) = val(*a).shape();
                    send(*a, DenseMatrix::filled(r, c, g.get(0, 0) / (r * c) as f64));
                }
                Op::RowSum(a) => {
                    let (r, c) = val(*a).shape();
                    send(*a, DenseMatrix::from_fn(r, c, |i, _| g.get(i, 0)));
                }
                Op::ColSum(a) => {
                    let (r, c) = val(*a).shape();
                    send(*a, DenseMatrix::from_fn(r, c, |_, j| g.get(0, j)));
                }
                Op::SelectRows(a, idx) => {
                    let (r, c) = val(*a).shape();
                    let mut d = DenseMatrix::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            let cur = d.get(i, j);
                            d.set(i, j, cur + g.get(k, j));
                        }
                    }
                    send(*a, d);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = val(p).shape();
                        let d = DenseMatrix::from_fn(r, c, |i, j| g.get(offset + i, j));
                        offset += r;
                        send(p, d);
                    }
                }
            }
        }
        Gradients { grads, shapes }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip(a: &DenseMatrix, b: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> DenseMatrix {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    DenseMatrix::from_vec_unchecked(a.rows(), a.cols(), data)
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

/// Elementwise `f(a, b)` with `b` broadcast to `a`'s shape, or vice versa.
fn broadcast_zip(a: &DenseMatrix, b: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> DenseMatrix {
    let (rows, cols) = broadcast_shape(a.shape(), b.shape()).unwrap_or_else(|| {
        panic!(
            "cannot broadcast {}x{} with {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )
    });
    if a.shape() == b.shape() {
        return zip(a, b, f);
    }
    let at = |m: &DenseMatrix, r: usize, c: usize| {
        m.get(
            if m.rows() == 1 { 0 } else { r },
            if m.cols() == 1 { 0 } else { c },
        )
    };
    DenseMatrix::from_fn(rows, cols, |r, c| f(at(a, r, c), at(b, r, c)))
}

/// Sums `g` down to `shape` along broadcast dimensions.
fn reduce_to(g: &DenseMatrix, shape: (usize, usize)) -> DenseMatrix {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = DenseMatrix::zeros(shape.0, shape.1);
    for r in 0..g.rows() {
        for c in 0..g.cols() {
            let (rr, cc) = (
                if shape.0 == 1 { 0 } else { r },
                if shape.1 == 1 { 0 } else { c },
            );
            let cur = out.get(rr, cc);
            out.set(rr, cc, cur + g.get(r, c));
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<DenseMatrix> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    /// Value of a 1×1 variable.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.shape(), (1, 1), "scalar() on a non-scalar variable");
        v.get(0, 0)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables from different tapes"
        );
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(
            a.cols(),
            b.rows(),
            "matmul {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        );
        let value = matmul_kernel(&a, &b);
        self.tape
            .binary(self.id, rhs.id, Op::MatMul(self.id, rhs.id), value)
    }

    pub fn t(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Transpose(self.id), |a| a.transpose())
    }

    fn elementwise(self, rhs: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        self.same_tape(&rhs);
        let value = broadcast_zip(&self.value(), &rhs.value(), f);
        self.tape.binary(self.id, rhs.id, op, value)
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Scale(self.id, k), |a| a.scale(k))
    }

    pub fn offset(self, k: f64) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Offset(self.id), |a| a.map(|v| v + k))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Exp(self.id), |a| a.map(f64::exp))
    }

    pub fn ln(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Log(self.id), |a| a.map(f64::ln))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Sqrt(self.id), |a| a.map(f64::sqrt))
    }

    pub fn abs(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Abs(self.id), |a| a.map(f64::abs))
    }

    pub fn relu(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Relu(self.id), |a| a.map(|v| v.max(0.0)))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Tanh(self.id), |a| a.map(f64::tanh))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Sigmoid(self.id), |a| a.map(stable_sigmoid))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Clamp(self.id, lo, hi), |a| {
            a.map(|v| v.clamp(lo, hi))
        })
    }

    pub fn row_softmax(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::RowSoftmax(self.id), |a| a.row_softmax())
    }

    pub fn row_log_softmax(self) -> Var<'t> {
        self.tape.unary(self.id, Op::RowLogSoftmax(self.id), |a| {
            let mut out = a.clone();
            let cols = a.cols();
            for row in out.data_mut().chunks_mut(cols) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            out
        })
    }

    /// Sum of all entries, 1×1.
    pub fn sum(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Sum(self.id), |a| DenseMatrix::scalar(a.sum()))
    }

    /// Mean of all entries, 1×1.
    pub fn mean(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Mean(self.id), |a| {
            DenseMatrix::scalar(a.mean())
        })
    }

    /// Per-row sums, N×1.
    pub fn row_sum(self) -> Var<'t> {
        self.tape.unary(self.id, Op::RowSum(self.id), |a| {
            DenseMatrix::from_vec_unchecked(a.rows(), 1, a.row_sums())
        })
    }

    /// Per-column sums, 1×M.
    pub fn col_sum(self) -> Var<'t> {
        self.tape.unary(self.id, Op::ColSum(self.id), |a| {
            DenseMatrix::from_vec_unchecked(1, a.cols(), a.col_sums())
        })
    }

    /// Mean over rows, 1×M.
    pub fn col_mean(self) -> Var<'t> {
        let n = self.shape().0 as f64;
        self.col_sum().scale(1.0 / n)
    }

    pub fn select_rows(self, indices: &[usize]) -> Var<'t> {
        let rows = self.shape().0;
        assert!(indices.iter().all(|&i| i < rows), "row index out of range");
        self.tape
            .unary(self.id, Op::SelectRows(self.id, indices.to_vec()), |a| {
                a.select_rows(indices)
            })
    }

    /// Vertically stacks variables with a common column count.
    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        let first = parts.first().expect("concat_rows needs at least one part");
        let tape = first.tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let cols = values[0].cols();
        assert!(
            values.iter().all(|v| v.cols() == cols),
            "concat_rows column mismatch"
        );
        let rows = values.iter().map(|v| v.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for v in &values {
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|p| tape.requires(p.id));
        let ids = parts.iter().map(|p| p.id).collect();
        tape.push(
            DenseMatrix::from_vec_unchecked(rows, cols, data),
            Op::ConcatRows(ids),
            rg,
        )
    }
}

pub(crate) fn stable_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

macro_rules! binary_operator {
    ($trait:ident, $method:ident, $op:ident, $f:expr) => {
        impl<'t> ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.elementwise(rhs, Op::$op(self.id, rhs.id), $f)
            }
        }
    };
}

binary_operator!(Add, add, Add, |a, b| a + b);
binary_operator!(Sub, sub, Sub, |a, b| a - b);
binary_operator!(Mul, mul, Mul, |a, b| a * b);
binary_operator!(Div, div, Div, |a, b| a / b);

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_gradient_is_transposed_product() {
        let tape = Tape::new();
        let a = tape.param(DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let b = tape.param(DenseMatrix::from_rows(&[[5.0], [6.0]]).unwrap());
        let loss = a.matmul(b).sum();
        let grads = tape.backward(loss);
        assert_eq!(grads.wrt(a).data(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(grads.wrt(b).data(), &[4.0, 6.0]);
    }

    #[test]
    fn broadcasting_reduces_back() {
        let tape = Tape::new();
        let m = tape.param(DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let col = tape.param(DenseMatrix::from_rows(&[[2.0], [4.0]]).unwrap());
        let loss = (m / col).sum();
        let grads = tape.backward(loss);
        assert_eq!(grads.wrt(m).data(), &[0.5, 0.5, 0.25, 0.25]);
        // d/dc (a/c) = -a/c², summed over the row
        let gc = grads.wrt(col);
        assert!((gc.get(0, 0) - (-(1.0 + 2.0) / 4.0)).abs() < 1e-15);
        assert!((gc.get(1, 0) - (-(3.0 + 4.0) / 16.0)).abs() < 1e-15);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(DenseMatrix::filled(2, 2, 3.0));
        let p = tape.param(DenseMatrix::filled(2, 2, 1.0));
        let loss = (c * p).sum();
        let grads = tape.backward(loss);
        assert_eq!(grads.wrt(c), DenseMatrix::zeros(2, 2));
        assert_eq!(grads.wrt(p), DenseMatrix::filled(2, 2, 3.0));
    }

    #[test]
    fn reused_variable_accumulates() {
        let tape = Tape::new();
        let x = tape.param(DenseMatrix::scalar(3.0));
        let loss = x * x + x;
        let grads = tape.backward(loss);
        assert_eq!(grads.wrt(x).get(0, 0), 7.0);
    }

    #[test]
    fn concat_and_select_route_gradients() {
        let tape = Tape::new();
        let a = tape.param(DenseMatrix::from_rows(&[[1.0, 2.0]]).unwrap());
        let b = tape.param(DenseMatrix::from_rows(&[[3.0, 4.0], [5.0, 6.0]]).unwrap());
        let stacked = Var::concat_rows(&[a, b]);
        assert_eq!(stacked.shape(), (3, 2));
        let picked = stacked.select_rows(&[2, 0, 2]);
        let grads = tape.backward(picked.sum());
        assert_eq!(grads.wrt(a).data(), &[1.0, 1.0]);
        assert_eq!(grads.wrt(b).data(), &[0.0, 0.0, 2.0, 2.0]);
    }
}
