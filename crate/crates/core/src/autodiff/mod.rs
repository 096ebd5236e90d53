//! Tape-style reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation pushes a new
//! node whose inputs already exist, so node order is a topological order and
//! [`Graph::backward`] simply walks it in reverse. Graphs are built fresh for
//! each forward pass and never mutated in place.
//!
//! ```
//! use edpa::autodiff::Graph;
//! use edpa::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let y = g.sum_all(sq).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
//! ```

mod check;
mod ops;

pub use check::{finite_difference_gradient, gradient_error};

use crate::error::{EdpaError, Result};
use crate::tensor::Tensor;

/// Floor applied to vector norms before dividing by them.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tags accepted by [`Graph::forward_op`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    Exp,
    Ln,
    Abs,
    Tanh,
    MatMul,
    Transpose,
    SumLast,
    MeanLast,
    SumAll,
    MeanAll,
    NormLast,
    ClampMin(f64),
    Clamp(f64, f64),
    AddRowVec,
    DivRows,
    LogSumExpRows,
    SoftmaxLast,
    Diag,
}

impl OpKind {
    pub fn arity(self) -> usize {
        match self {
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div
            | OpKind::MatMul
            | OpKind::AddRowVec
            | OpKind::DivRows => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Tanh(Var),
    MatMul(Var, Var),
    Transpose(Var),
    SumLast(Var),
    MeanLast(Var),
    SumAll(Var),
    MeanAll(Var),
    NormLast(Var),
    ClampMin(Var, f64),
    Clamp(Var, f64, f64),
    AddRowVec(Var, Var),
    DivRows(Var, Var),
    /// Caches the row-wise softmax.
    LogSumExpRows(Var, Vec<f64>),
    SoftmaxLast(Var),
    Diag(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    ScatterRows {
        base: Var,
        rows: Var,
        index: Vec<usize>,
    },
    Patchify {
        src: Var,
        patch: usize,
    },
    Paste {
        image: Var,
        patch: Var,
        origin: (usize, usize),
    },
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needed one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when the root does not depend on `v`.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub(crate) fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(op, value, rg)
    }

    /// Applies an operation by tag. The dedicated methods are equivalent and
    /// usually more convenient.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != kind.arity() {
            return Err(EdpaError::Config(format!(
                "{kind:?} takes {} inputs, got {}",
                kind.arity(),
                inputs.len()
            )));
        }
        let a = inputs[0];
        let b = inputs.get(1).copied().unwrap_or(a);
        match kind {
            OpKind::Add => self.add(a, b),
            OpKind::Sub => self.sub(a, b),
            OpKind::Mul => self.mul(a, b),
            OpKind::Div => self.div(a, b),
            OpKind::Scale(c) => Ok(self.scale(a, c)),
            OpKind::Exp => Ok(self.exp(a)),
            OpKind::Ln => self.ln(a),
            OpKind::Abs => Ok(self.abs(a)),
            OpKind::Tanh => Ok(self.tanh(a)),
            OpKind::MatMul => self.matmul(a, b),
            OpKind::Transpose => self.transpose(a),
            OpKind::SumLast => self.sum_last(a),
            OpKind::MeanLast => self.mean_last(a),
            OpKind::SumAll => self.sum_all(a),
            OpKind::MeanAll => self.mean_all(a),
            OpKind::NormLast => self.norm_last(a),
            OpKind::ClampMin(lo) => Ok(self.clamp_min(a, lo)),
            OpKind::Clamp(lo, hi) => Ok(self.clamp(a, lo, hi)),
            OpKind::AddRowVec => self.add_row_vec(a, b),
            OpKind::DivRows => self.div_rows(a, b),
            OpKind::LogSumExpRows => self.logsumexp_rows(a),
            OpKind::SoftmaxLast => Ok(self.softmax_last(a)),
            OpKind::Diag => self.diag(a),
        }
    }

    /// Reverse sweep from a scalar root. Each node is visited once, in
    /// reverse creation order.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(EdpaError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                ops::propagate(self, node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let mut shapes: Vec<Vec<usize>> = self.nodes[..=root.0].iter().map(|n| n.value.shape().to_vec()).collect();
        shapes.shrink_to_fit();
        Ok(Gradients { grads, shapes })
    }

    pub(crate) fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }
}

/// Differentiable cosine similarity of two vectors,
/// `a.b / (max(|a|, eps) * max(|b|, eps))`, clamped to `[-1, 1]`.
pub fn cosine_similarity(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a).len() != 1 || g.shape(a) != g.shape(b) {
        return Err(EdpaError::ShapeMismatch {
            op: "cosine_similarity",
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        });
    }
    let prod = g.mul(a, b)?;
    let dot = g.sum_last(prod)?;
    let na = g.norm_last(a)?;
    let na = g.clamp_min(na, NORM_EPS);
    let nb = g.norm_last(b)?;
    let nb = g.clamp_min(nb, NORM_EPS);
    let den = g.mul(na, nb)?;
    let cos = g.div(dot, den)?;
    Ok(g.clamp(cos, -1.0, 1.0))
}

/// Rows scaled to unit length (norm floored at [`NORM_EPS`]).
pub fn normalize_rows(g: &mut Graph, a: Var) -> Result<Var> {
    let n = g.norm_last(a)?;
    let n = g.clamp_min(n, NORM_EPS);
    g.div_rows(a, n)
}

/// Pairwise cosine matrix: entry `(i, j)` is `cos(a_i, b_j)` for rows of
/// `a` (`n x d`) and `b` (`m x d`).
pub fn cosine_matrix(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (_, da) = g.value(a).dims2()?;
    let (_, db) = g.value(b).dims2()?;
    if da != db {
        return Err(EdpaError::ShapeMismatch {
            op: "cosine_matrix",
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        });
    }
    let an = normalize_rows(g, a)?;
    let bn = normalize_rows(g, b)?;
    let bt = g.transpose(bn)?;
    let s = g.matmul(an, bt)?;
    Ok(g.clamp(s, -1.0, 1.0))
}

#[cfg(test)]
mod tests;
