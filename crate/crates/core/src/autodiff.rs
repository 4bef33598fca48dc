//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation as it is evaluated. Values are held by
//! the tape and addressed through [`Var`] handles; a [`Tape::backward`] call
//! sweeps the recorded nodes in reverse id order exactly once and returns the
//! gradient of a scalar loss with respect to every tracked node.
//!
//! Leaves come in two flavours: [`Tape::leaf`] is tracked and receives a
//! gradient, [`Tape::constant`] is not and never appears in [`Gradients`].
//! Every operation checks that its output is finite, so a diverging
//! computation fails at the op that first produced a NaN or infinity.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Pointwise operations, binary or unary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Mul,
    Tanh,
    Relu,
    Sigmoid,
    Scale(f64),
}

/// Nonlinearity tag used by layers and the coordinator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Fixed sparse linear map `out_i = sum_j w_ij * in_j` acting on rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SparseRows {
    pub fn new(n: usize, entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(i, j, _)) = entries.iter().find(|(i, j, _)| *i >= n || *j >= n) {
            return Err(Error::Contract(format!(
                "sparse entry ({i},{j}) outside {n}x{n}"
            )));
        }
        Ok(Self { n, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for &(i, j, w) in &self.entries {
            m.set(i, j, m.get(i, j) + w);
        }
        m
    }

    pub fn apply(&self, h: &Matrix) -> Result<Matrix> {
        if h.rows() != self.n {
            return Err(Error::dim("propagate", (self.n, self.n), h.shape()));
        }
        let mut out = Matrix::zeros(h.rows(), h.cols());
        for &(i, j, w) in &self.entries {
            let src = h.row(j).to_vec();
            for (o, s) in out.row_mut(i).iter_mut().zip(&src) {
                *o += w * s;
            }
        }
        Ok(out)
    }

    fn apply_transpose(&self, g: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(g.rows(), g.cols());
        for &(i, j, w) in &self.entries {
            let src = g.row(i).to_vec();
            for (o, s) in out.row_mut(j).iter_mut().zip(&src) {
                *o += w * s;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Tanh,
    Relu,
    Sigmoid,
    Softplus,
    Sqrt,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Unary(usize, Unary),
    Clamp(usize, f64, f64),
    Sum(usize),
    Transpose(usize),
    Diag(usize),
    Reshape(usize),
    ConcatRows(Vec<usize>),
    Row(usize, usize),
    Propagate(usize, Rc<SparseRows>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    tracked: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    flops: Cell<u64>,
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

    /// Floating point operations performed by forward evaluation so far.
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    pub fn leaf(&self, value: Matrix) -> Result<Var> {
        self.push(Op::Leaf, value, true, 0, "leaf")
    }

    pub fn constant(&self, value: Matrix) -> Result<Var> {
        self.push(Op::Constant, value, false, 0, "constant")
    }

    pub fn value(&self, v: Var) -> Matrix {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    fn push(
        &self,
        op: Op,
        value: Matrix,
        tracked: bool,
        flops: u64,
        name: &'static str,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.flops.set(self.flops.get() + flops);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value, tracked });
        Ok(Var(nodes.len() - 1))
    }

    fn tracked_any(&self, vars: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|&v| nodes[v].tracked)
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.zip_with(&nodes[b.0].value, name, f)?
        };
        let flops = value.len() as u64;
        self.push(op, value, self.tracked_any(&[a.0, b.0]), flops, name)
    }

    fn unary(
        &self,
        a: Var,
        kind: Unary,
        name: &'static str,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var> {
        let value = self.nodes.borrow()[a.0].value.map(f);
        let flops = value.len() as u64;
        self.push(
            Op::Unary(a.0, kind),
            value,
            self.tracked_any(&[a.0]),
            flops,
            name,
        )
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)?
        };
        let inner = self.shape(a).1 as u64;
        let flops = 2 * inner * value.len() as u64;
        self.push(
            Op::MatMul(a.0, b.0),
            value,
            self.tracked_any(&[a.0, b.0]),
            flops,
            "matmul",
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div(a.0, b.0), |x, y| x / y)
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let value = self.nodes.borrow()[a.0].value.scale(c);
        let flops = value.len() as u64;
        self.push(
            Op::Scale(a.0, c),
            value,
            self.tracked_any(&[a.0]),
            flops,
            "scale",
        )
    }

    /// `a + c` pointwise.
    pub fn offset(&self, a: Var, c: f64) -> Result<Var> {
        let value = self.nodes.borrow()[a.0].value.map(|x| x + c);
        let flops = value.len() as u64;
        self.push(
            Op::Offset(a.0),
            value,
            self.tracked_any(&[a.0]),
            flops,
            "offset",
        )
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh, "tanh", f64::tanh)
    }

    /// Subgradient at zero is zero.
    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu, "relu", |x| x.max(0.0))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid, "sigmoid", sigmoid)
    }

    pub fn softplus(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Softplus, "softplus", softplus)
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sqrt, "sqrt", f64::sqrt)
    }

    pub fn activate(&self, act: Activation, a: Var) -> Result<Var> {
        match act {
            Activation::Tanh => self.tanh(a),
            Activation::Relu => self.relu(a),
            Activation::Sigmoid => self.sigmoid(a),
            Activation::Identity => Ok(a),
        }
    }

    pub fn elementwise(&self, op: Elementwise, operands: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if operands.len() != arity {
            return Err(Error::Contract(format!(
                "{op:?} takes {arity} operand(s), got {}",
                operands.len()
            )));
        }
        match op {
            Elementwise::Add => self.add(operands[0], operands[1]),
            Elementwise::Mul => self.mul(operands[0], operands[1]),
            Elementwise::Tanh => self.tanh(operands[0]),
            Elementwise::Relu => self.relu(operands[0]),
            Elementwise::Sigmoid => self.sigmoid(operands[0]),
            Elementwise::Scale(c) => self.scale(operands[0], c),
        }
    }

    /// Pointwise clamp into `[lo, hi]`; the subgradient is 1 inside the
    /// closed interval and 0 outside.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.nodes.borrow()[a.0].value.map(|x| x.clamp(lo, hi));
        let flops = value.len() as u64;
        self.push(
            Op::Clamp(a.0, lo, hi),
            value,
            self.tracked_any(&[a.0]),
            flops,
            "clamp",
        )
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            Matrix::scalar(nodes[a.0].value.sum())
        };
        let flops = self.shape(a).0 as u64 * self.shape(a).1 as u64;
        self.push(Op::Sum(a.0), value, self.tracked_any(&[a.0]), flops, "sum")
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let s = self.sum(a)?;
        self.scale(s, 1.0 / (r * c) as f64)
    }

    pub fn sum_squares(&self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        self.sum(sq)
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = self.nodes.borrow()[a.0].value.transpose();
        self.push(
            Op::Transpose(a.0),
            value,
            self.tracked_any(&[a.0]),
            0,
            "transpose",
        )
    }

    /// Square diagonal matrix from a row or column vector.
    pub fn diag(&self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r != 1 && c != 1 {
            return Err(Error::dim("diag", (r, c), (r.max(c), 1)));
        }
        let value = Matrix::diag(self.nodes.borrow()[a.0].value.data());
        self.push(Op::Diag(a.0), value, self.tracked_any(&[a.0]), 0, "diag")
    }

    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.nodes.borrow()[a.0].value.reshape(rows, cols)?;
        self.push(
            Op::Reshape(a.0),
            value,
            self.tracked_any(&[a.0]),
            0,
            "reshape",
        )
    }

    /// Stacks 1xF row nodes into an LxF node.
    pub fn concat_rows(&self, rows: &[Var]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            for r in rows {
                let shape = nodes[r.0].value.shape();
                if shape.0 != 1 {
                    return Err(Error::dim("concat_rows", shape, (1, shape.1)));
                }
            }
            let slices: Vec<&[f64]> = rows.iter().map(|r| nodes[r.0].value.data()).collect();
            Matrix::stack_rows(&slices)?
        };
        let ids: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let tracked = self.tracked_any(&ids);
        self.push(Op::ConcatRows(ids), value, tracked, 0, "concat_rows")
    }

    /// Row `i` of `a` as a 1xF node.
    pub fn row(&self, a: Var, i: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let m = &nodes[a.0].value;
            if i >= m.rows() {
                return Err(Error::Contract(format!(
                    "row {i} out of range for {} rows",
                    m.rows()
                )));
            }
            Matrix::row_vector(m.row(i))
        };
        self.push(Op::Row(a.0, i), value, self.tracked_any(&[a.0]), 0, "row")
    }

    /// Applies a fixed sparse row-mixing operator, costing `2 * nnz * F` flops.
    pub fn propagate(&self, op: Rc<SparseRows>, h: Var) -> Result<Var> {
        let value = op.apply(&self.nodes.borrow()[h.0].value)?;
        let flops = 2 * op.nnz() as u64 * value.cols() as u64;
        self.push(
            Op::Propagate(h.0, op),
            value,
            self.tracked_any(&[h.0]),
            flops,
            "propagate",
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.0].value.shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                shape.0, shape.1
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        if nodes[loss.0].tracked {
            grads[loss.0] = Some(Matrix::scalar(1.0));
        }

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mut send = |target: usize, contribution: Matrix| {
                if !nodes[target].tracked {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => existing
                        .axpy(1.0, &contribution)
                        .expect("gradient shape matches its node"),
                    slot @ None => *slot = Some(contribution),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul(a, b) => {
                    if nodes[*a].tracked {
                        send(*a, g.matmul(&val(*b).transpose())?);
                    }
                    if nodes[*b].tracked {
                        send(*b, val(*a).transpose().matmul(&g)?);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    send(*a, g.hadamard(val(*b))?);
                    send(*b, g.hadamard(val(*a))?);
                }
                Op::Div(a, b) => {
                    send(*a, g.zip_with(val(*b), "div", |g, y| g / y)?);
                    let gb = g
                        .hadamard(val(*a))?
                        .zip_with(val(*b), "div", |ga, y| -ga / (y * y))?;
                    send(*b, gb);
                }
                Op::Scale(a, c) => send(*a, g.scale(*c)),
                Op::Offset(a) => send(*a, g.clone()),
                Op::Unary(a, kind) => {
                    let x = val(*a);
                    let y = &node.value;
                    let local = match kind {
                        Unary::Tanh => y.map(|t| 1.0 - t * t),
                        Unary::Relu => x.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
                        Unary::Sigmoid => y.map(|s| s * (1.0 - s)),
                        Unary::Softplus => x.map(sigmoid),
                        Unary::Sqrt => y.map(|s| 0.5 / s),
                    };
                    send(*a, g.hadamard(&local)?);
                }
                Op::Clamp(a, lo, hi) => {
                    let mask = val(*a).map(|v| if v >= *lo && v <= *hi { 1.0 } else { 0.0 });
                    send(*a, g.hadamard(&mask)?);
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    send(*a, Matrix::filled(r, c, g.item()?));
                }
                Op::Transpose(a) => send(*a, g.transpose()),
                Op::Diag(a) => {
                    let (r, c) = val(*a).shape();
                    let d: Vec<f64> = (0..g.rows()).map(|i| g.get(i, i)).collect();
                    send(*a, Matrix::new(r, c, d)?);
                }
                Op::Reshape(a) => {
                    let (r, c) = val(*a).shape();
                    send(*a, g.reshape(r, c)?);
                }
                Op::ConcatRows(parts) => {
                    for (i, p) in parts.iter().enumerate() {
                        send(*p, Matrix::row_vector(g.row(i)));
                    }
                }
                Op::Row(a, i) => {
                    let (r, c) = val(*a).shape();
                    let mut full = Matrix::zeros(r, c);
                    full.row_mut(*i).copy_from_slice(g.data());
                    send(*a, full);
                }
                Op::Propagate(h, op) => send(*h, op.apply_transpose(&g)),
            }
            grads[id] = Some(g);
        }

        for (id, node) in nodes.iter().enumerate() {
            if node.tracked && matches!(node.op, Op::Leaf) && grads[id].is_none() {
                let (r, c) = node.value.shape();
                grads[id] = Some(Matrix::zeros(r, c));
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of a backward sweep: one gradient per tracked node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` is untracked or did not influence the loss.
    /// Tracked leaves always have an entry (zeros when disconnected).
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn contains(&self, v: Var) -> bool {
        self.get(v).is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let tape = Tape::new();
        let m = tape
            .leaf(Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]))
            .unwrap();
        let loss = tape.sum(m).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(m).unwrap(), &Matrix::ones(2, 2));
    }

    #[test]
    fn constants_are_absent_from_gradients() {
        let tape = Tape::new();
        let a = tape.leaf(Matrix::ones(2, 2)).unwrap();
        let c = tape.constant(Matrix::ones(2, 2)).unwrap();
        let loss = tape.sum(tape.mul(a, c).unwrap()).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(a).is_some());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let a = tape.leaf(Matrix::ones(2, 1)).unwrap();
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn pointwise_examples() {
        let tape = Tape::new();
        let z = tape.constant(Matrix::zeros(2, 3)).unwrap();
        assert_eq!(tape.value(tape.tanh(z).unwrap()), Matrix::zeros(2, 3));
        let x = tape
            .constant(Matrix::row_vector(&[-1.0, 2.0, 0.0]))
            .unwrap();
        assert_eq!(tape.value(tape.relu(x).unwrap()).data(), &[0.0, 2.0, 0.0]);
        let s = tape.elementwise(Elementwise::Sigmoid, &[z]).unwrap();
        assert_eq!(tape.value(s).get(0, 0), 0.5);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::row_vector(&[0.0, 1.0])).unwrap();
        let loss = tape.sum(tape.relu(x).unwrap()).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn binary_shape_mismatch() {
        let tape = Tape::new();
        let a = tape.leaf(Matrix::ones(2, 2)).unwrap();
        let b = tape.leaf(Matrix::ones(2, 3)).unwrap();
        assert!(matches!(tape.add(a, b), Err(Error::Dimension { .. })));
        assert!(matches!(tape.matmul(b, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn non_finite_values_are_reported() {
        let tape = Tape::new();
        let a = tape.leaf(Matrix::scalar(-1.0)).unwrap();
        assert!(matches!(tape.sqrt(a), Err(Error::NonFinite { op: "sqrt" })));
    }

    #[test]
    fn clamp_passes_gradient_only_inside() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::row_vector(&[-0.5, 0.3, 1.7])).unwrap();
        let loss = tape.sum(tape.clamp(x, 0.0, 1.0).unwrap()).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn sparse_rows_match_dense() {
        let op = SparseRows::new(
            3,
            vec![(0, 0, 0.5), (0, 1, 0.25), (2, 1, -1.0), (1, 1, 2.0)],
        )
        .unwrap();
        let h = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let dense = op.to_dense().matmul(&h).unwrap();
        assert_eq!(op.apply(&h).unwrap(), dense);
    }
}
