//! Dense row-major tensors with a reverse-mode tape.
//!
//! Every intermediate of the encoder, matcher and pose networks lives on a
//! [`Tape`]. Values are immutable once recorded; gradients of leaves that
//! were registered with `requires_grad` accumulate across calls to
//! [`Tape::backward`] until [`Tape::zero_grad`] is called.

mod check;
mod ops;

pub use check::{grad_check, grad_check_many, GradCheckReport};

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid parameter: {msg}")]
    Parameter { op: &'static str, msg: String },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Immutable n-dimensional array of `f64` in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data.as_slice())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; numel]),
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    /// 2-D tensor from a list of equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Parameter {
                op: "from_rows",
                msg: "ragged rows".into(),
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self {
            shape: vec![n, n],
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Size of the last dimension (1 for scalars).
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[self.shape.len() - 1]
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub(crate) fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: ops::Op,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<f64>>,
}

/// Computation record: values and the primitive that produced each, in
/// creation (hence topological) order.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf whose gradient is accumulated by `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records a leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, ops::Op::Leaf, requires_grad)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: ops::Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
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

    /// Accumulated gradient of a leaf, if any has been computed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every
    /// requires-grad leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Shape {
                op: "backward",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![1],
            });
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adjoints[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(adj) = adjoints[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let ops::Op::Leaf = self.nodes[idx].op {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(g) => g.iter_mut().zip(&adj).for_each(|(g, a)| *g += a),
                    None => node.grad = Some(adj),
                }
                continue;
            }
            ops::propagate(self, idx, &adj, &mut adjoints);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn squared_norm_gradient_is_twice_x() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 4.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 8.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.7]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![1.5], vec![-0.4]]).unwrap());
        let y = tape.matmul(a, b).unwrap();
        let r = tape.relu(y);
        let loss = tape.sum(r);
        tape.backward(loss).unwrap();
        let once = tape.grad(a).unwrap().to_vec();
        tape.backward(loss).unwrap();
        let twice = tape.grad(a).unwrap();
        for (o, t) in once.iter().zip(twice) {
            assert_eq!(2.0 * o, *t);
        }
        assert!(tape.grad(b).is_none());
    }
}
