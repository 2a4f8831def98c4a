//! Reverse-mode automatic differentiation over dense real vectors/matrices.
//!
//! Operations are recorded on an append-only [`Tape`]; [`Tape::backward`]
//! replays the tape in reverse to accumulate gradients of a scalar root with
//! respect to every `requires_grad` leaf. The op set is closed and fixed:
//! matmul, add, scalar-mul, elementwise mul by a constant, tanh, square,
//! min-with-zero, sum and mean. There is no broadcasting; operand shapes must
//! conform exactly.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error)]
pub enum AdiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: empty tensors are not representable on the tape")]
    EmptyTensor { op: &'static str },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: (usize, usize) },
    #[error("variable belongs to a different tape")]
    ForeignVar,
}

/// Dense row-major matrix of f64. Column vectors are `n x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length != rows*cols");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![x],
        }
    }

    /// Column vector (`n x 1`).
    pub fn col(data: Vec<f64>) -> Self {
        Tensor {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn add_scaled_assign(&mut self, other: &Tensor, factor: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }

    /// `self * other` (matrix product).
    fn matmul(&self, other: &Tensor) -> Tensor {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = Tensor::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        out
    }

    /// `self * other^T`.
    fn matmul_nt(&self, other: &Tensor) -> Tensor {
        debug_assert_eq!(self.cols, other.cols);
        let mut out = Tensor::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.data[i * self.cols + k] * other.data[j * other.cols + k];
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        out
    }

    /// `self^T * other`.
    fn matmul_tn(&self, other: &Tensor) -> Tensor {
        debug_assert_eq!(self.rows, other.rows);
        let mut out = Tensor::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            for i in 0..self.cols {
                let a = self.data[k * self.cols + i];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        out
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape_id: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    MatMul(usize, usize),
    Scale(usize, f64),
    /// Elementwise multiply by a constant tensor of identical shape; used for
    /// affine (de)normalization maps and feature masks.
    MulConst(usize, Tensor),
    Tanh(usize),
    Square(usize),
    MinZero(usize),
    Sum(usize),
    Mean(usize),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of elementary operations. Operand indices always point
/// strictly backwards, so a single reverse sweep visits each node once.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        debug_assert_eq!(v.tape_id, self.id);
        &self.nodes[v.index].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).scalar_value()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        debug_assert_eq!(v.tape_id, self.id);
        self.nodes[v.index].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape_id: self.id,
            index,
        }
    }

    fn check(&self, op: &'static str, v: Var) -> Result<(), AdiffError> {
        if v.tape_id != self.id {
            return Err(AdiffError::ForeignVar);
        }
        debug_assert!(v.index < self.nodes.len());
        let _ = op;
        Ok(())
    }

    /// Record an input. Gradients are accumulated only for leaves with
    /// `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var, AdiffError> {
        if value.is_empty() {
            return Err(AdiffError::EmptyTensor { op: "leaf" });
        }
        Ok(self.push(value, requires_grad, Op::Leaf))
    }

    /// Record a non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, AdiffError> {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdiffError> {
        self.check("add", a)?;
        self.check("add", b)?;
        let (ta, tb) = (&self.nodes[a.index], &self.nodes[b.index]);
        if ta.value.shape() != tb.value.shape() {
            return Err(AdiffError::ShapeMismatch {
                op: "add",
                lhs: ta.value.shape(),
                rhs: tb.value.shape(),
            });
        }
        let mut value = ta.value.clone();
        value.add_scaled_assign(&tb.value, 1.0);
        let rg = ta.requires_grad || tb.requires_grad;
        Ok(self.push(value, rg, Op::Add(a.index, b.index)))
    }

    /// `a - b`, composed as `a + (-1) * b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdiffError> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdiffError> {
        self.check("matmul", a)?;
        self.check("matmul", b)?;
        let (ta, tb) = (&self.nodes[a.index], &self.nodes[b.index]);
        if ta.value.shape().1 != tb.value.shape().0 {
            return Err(AdiffError::ShapeMismatch {
                op: "matmul",
                lhs: ta.value.shape(),
                rhs: tb.value.shape(),
            });
        }
        let value = ta.value.matmul(&tb.value);
        let rg = ta.requires_grad || tb.requires_grad;
        Ok(self.push(value, rg, Op::MatMul(a.index, b.index)))
    }

    /// Multiply by a compile-time constant scalar.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, AdiffError> {
        self.check("scale", a)?;
        let node = &self.nodes[a.index];
        let value = node.value.map(|x| factor * x);
        let rg = node.requires_grad;
        Ok(self.push(value, rg, Op::Scale(a.index, factor)))
    }

    /// Elementwise multiply by a constant tensor of identical shape.
    pub fn mul_const(&mut self, a: Var, coeff: &Tensor) -> Result<Var, AdiffError> {
        self.check("mul_const", a)?;
        let node = &self.nodes[a.index];
        if node.value.shape() != coeff.shape() {
            return Err(AdiffError::ShapeMismatch {
                op: "mul_const",
                lhs: node.value.shape(),
                rhs: coeff.shape(),
            });
        }
        let data = node
            .value
            .data()
            .iter()
            .zip(coeff.data())
            .map(|(&x, &c)| x * c)
            .collect();
        let value = Tensor::new(node.value.rows, node.value.cols, data);
        let rg = node.requires_grad;
        Ok(self.push(value, rg, Op::MulConst(a.index, coeff.clone())))
    }

    /// Add a constant tensor of identical shape (recorded as `add` with a
    /// constant leaf).
    pub fn add_const(&mut self, a: Var, offset: &Tensor) -> Result<Var, AdiffError> {
        let c = self.constant(offset.clone())?;
        self.add(a, c)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AdiffError> {
        self.check("tanh", a)?;
        let node = &self.nodes[a.index];
        let value = node.value.map(f64::tanh);
        let rg = node.requires_grad;
        Ok(self.push(value, rg, Op::Tanh(a.index)))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, AdiffError> {
        self.check("square", a)?;
        let node = &self.nodes[a.index];
        let value = node.value.map(|x| x * x);
        let rg = node.requires_grad;
        Ok(self.push(value, rg, Op::Square(a.index)))
    }

    /// Elementwise `min(0, x)`.
    pub fn min_zero(&mut self, a: Var) -> Result<Var, AdiffError> {
        self.check("min_zero", a)?;
        let node = &self.nodes[a.index];
        let value = node.value.map(|x| x.min(0.0));
        let rg = node.requires_grad;
        Ok(self.push(value, rg, Op::MinZero(a.index)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AdiffError> {
        self.check("sum", a)?;
        let node = &self.nodes[a.index];
        let value = Tensor::scalar(node.value.data().iter().sum());
        let rg = node.requires_grad;
        Ok(self.push(value, rg, Op::Sum(a.index)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AdiffError> {
        self.check("mean", a)?;
        let node = &self.nodes[a.index];
        let n = node.value.len() as f64;
        let value = Tensor::scalar(node.value.data().iter().sum::<f64>() / n);
        let rg = node.requires_grad;
        Ok(self.push(value, rg, Op::Mean(a.index)))
    }

    /// `(1/n) * sum_i min(0, v_i)^2` — the penalty kernel for negative
    /// predictions. Zero iff every element is non-negative.
    pub fn min_zero_square_mean(&mut self, v: Var) -> Result<Var, AdiffError> {
        let clipped = self.min_zero(v)?;
        let sq = self.square(clipped)?;
        self.mean(sq)
    }

    /// Gradients of a scalar `root` with respect to every `requires_grad`
    /// leaf, accumulated as a sum over all paths. Replaying the same tape
    /// yields bitwise-identical results.
    pub fn backward(&self, root: Var) -> Result<Gradients, AdiffError> {
        self.check("backward", root)?;
        let root_node = &self.nodes[root.index];
        if !root_node.value.is_scalar() {
            return Err(AdiffError::NonScalarRoot {
                shape: root_node.value.shape(),
            });
        }

        let mut adjoints: Vec<Option<Tensor>> = vec![None; root.index + 1];
        adjoints[root.index] = Some(Tensor::scalar(1.0));
        let mut grads: HashMap<usize, Tensor> = HashMap::new();

        for i in (0..=root.index).rev() {
            let Some(adj) = adjoints[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads
                        .entry(i)
                        .and_modify(|g| g.add_scaled_assign(&adj, 1.0))
                        .or_insert(adj);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adjoints, &self.nodes, *a, &adj, 1.0);
                    accumulate(&mut adjoints, &self.nodes, *b, &adj, 1.0);
                }
                Op::MatMul(a, b) => {
                    if self.nodes[*a].requires_grad {
                        let da = adj.matmul_nt(&self.nodes[*b].value);
                        accumulate(&mut adjoints, &self.nodes, *a, &da, 1.0);
                    }
                    if self.nodes[*b].requires_grad {
                        let db = self.nodes[*a].value.matmul_tn(&adj);
                        accumulate(&mut adjoints, &self.nodes, *b, &db, 1.0);
                    }
                }
                Op::Scale(a, factor) => {
                    accumulate(&mut adjoints, &self.nodes, *a, &adj, *factor);
                }
                Op::MulConst(a, coeff) => {
                    let da = Tensor::new(
                        adj.rows,
                        adj.cols,
                        adj.data()
                            .iter()
                            .zip(coeff.data())
                            .map(|(&g, &c)| g * c)
                            .collect(),
                    );
                    accumulate(&mut adjoints, &self.nodes, *a, &da, 1.0);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let da = Tensor::new(
                        adj.rows,
                        adj.cols,
                        adj.data()
                            .iter()
                            .zip(y.data())
                            .map(|(&g, &t)| g * (1.0 - t * t))
                            .collect(),
                    );
                    accumulate(&mut adjoints, &self.nodes, *a, &da, 1.0);
                }
                Op::Square(a) => {
                    let x = &self.nodes[*a].value;
                    let da = Tensor::new(
                        adj.rows,
                        adj.cols,
                        adj.data()
                            .iter()
                            .zip(x.data())
                            .map(|(&g, &xv)| g * 2.0 * xv)
                            .collect(),
                    );
                    accumulate(&mut adjoints, &self.nodes, *a, &da, 1.0);
                }
                Op::MinZero(a) => {
                    // d/dx min(0,x) = 1 on x < 0, 0 on x >= 0.
                    let x = &self.nodes[*a].value;
                    let da = Tensor::new(
                        adj.rows,
                        adj.cols,
                        adj.data()
                            .iter()
                            .zip(x.data())
                            .map(|(&g, &xv)| if xv < 0.0 { g } else { 0.0 })
                            .collect(),
                    );
                    accumulate(&mut adjoints, &self.nodes, *a, &da, 1.0);
                }
                Op::Sum(a) => {
                    let g = adj.scalar_value();
                    let src = &self.nodes[*a].value;
                    let da = Tensor::new(src.rows, src.cols, vec![g; src.len()]);
                    accumulate(&mut adjoints, &self.nodes, *a, &da, 1.0);
                }
                Op::Mean(a) => {
                    let src = &self.nodes[*a].value;
                    let g = adj.scalar_value() / src.len() as f64;
                    let da = Tensor::new(src.rows, src.cols, vec![g; src.len()]);
                    accumulate(&mut adjoints, &self.nodes, *a, &da, 1.0);
                }
            }
        }

        Ok(Gradients { grads })
    }
}

fn accumulate(
    adjoints: &mut [Option<Tensor>],
    nodes: &[Node],
    target: usize,
    delta: &Tensor,
    factor: f64,
) {
    if !nodes[target].requires_grad {
        return;
    }
    match &mut adjoints[target] {
        Some(existing) => existing.add_scaled_assign(delta, factor),
        slot @ None => {
            let mut t = delta.clone();
            if factor != 1.0 {
                t = t.map(|x| factor * x);
            }
            *slot = Some(t);
        }
    }
}

/// Gradient tensors keyed by leaf handle.
#[derive(Debug)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v.index)
    }
}
