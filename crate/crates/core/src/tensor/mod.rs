//! Reverse-mode automatic differentiation on n-dimensional arrays.
//!
//! A [`Tensor`] couples a value buffer with a same-shape gradient buffer and
//! an optional back-reference to the operation that produced it. Operations
//! build an acyclic graph; [`Tensor::backward`] traverses it once in reverse
//! topological order and accumulates gradients into every trainable leaf.
//!
//! The engine is deliberately minimal: it supports exactly the operations
//! needed by the networks in this crate, runs on the CPU, and is generic over
//! `f32` (training) and `f64` (used by the gradient-check tests).

mod adam;
pub mod ops;

pub use adam::Adam;

use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, IxDyn, ScalarOperand};
use thiserror::Error;

/// Element type for tensors: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + ndarray::LinalgScalar
    + ScalarOperand
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("l1 normalization input is degenerate (norm {norm:e} below {min:e})")]
    DegenerateNorm { norm: f64, min: f64 },
    #[error("batch norm in train mode needs at least 2 elements per channel, got {0}")]
    UndefinedVariance(usize),
    #[error("optimizer state for parameter {index} has shape {state:?} but parameter has {param:?}")]
    StateShapeDrift {
        index: usize,
        state: Vec<usize>,
        param: Vec<usize>,
    },
    #[error(
        "convolution output would be empty: input {h}x{w}, kernel {k}, stride {stride}, padding {padding}"
    )]
    EmptyConvOutput {
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        padding: usize,
    },
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Backward pass of one recorded operation. Receives the gradient of the
/// loss with respect to the operation's output and accumulates into the
/// inputs captured by the closure. Closures must never capture the output
/// tensor itself (that would create a reference cycle); they capture copies
/// of whatever forward values they need.
type Backprop<T> = Box<dyn Fn(&ArrayD<T>)>;

struct Node<T: Scalar> {
    inputs: Vec<Tensor<T>>,
    backprop: Backprop<T>,
}

struct Inner<T: Scalar> {
    id: u64,
    values: RefCell<ArrayD<T>>,
    grad: RefCell<ArrayD<T>>,
    requires_grad: bool,
    node: Option<Node<T>>,
}

/// An n-dimensional array participating in a reverse-mode differentiation
/// graph. Cloning is cheap and aliases the same storage.
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn new(values: ArrayD<T>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        let grad = ArrayD::zeros(values.raw_dim());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                values: RefCell::new(values),
                grad: RefCell::new(grad),
                requires_grad,
                node,
            }),
        }
    }

    /// Constant leaf: never accumulates gradient.
    pub fn from_array(values: ArrayD<T>) -> Self {
        Self::new(values, false, None)
    }

    /// Trainable leaf: accumulates gradient on backward.
    pub fn param(values: ArrayD<T>) -> Self {
        Self::new(values, true, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_array(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn scalar(v: T) -> Self {
        Self::from_array(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Internal constructor for op results. The output tracks gradients iff
    /// any input does; otherwise no node is recorded and the graph is pruned.
    pub(crate) fn from_op(
        values: ArrayD<T>,
        inputs: &[&Tensor<T>],
        backprop: impl Fn(&ArrayD<T>) + 'static,
    ) -> Self {
        let track = inputs.iter().any(|t| t.requires_grad());
        if track {
            let node = Node {
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                backprop: Box::new(backprop),
            };
            Self::new(values, true, Some(node))
        } else {
            Self::new(values, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    /// True when the tensors alias the same storage.
    pub fn ptr_eq(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.values.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.inner.values.borrow().len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    pub fn values(&self) -> Ref<'_, ArrayD<T>> {
        self.inner.values.borrow()
    }

    /// Mutable access to the value buffer (optimizer updates, running stats).
    pub fn values_mut(&self) -> RefMut<'_, ArrayD<T>> {
        self.inner.values.borrow_mut()
    }

    pub fn grad(&self) -> Ref<'_, ArrayD<T>> {
        self.inner.grad.borrow()
    }

    pub fn zero_grad(&self) {
        self.inner.grad.borrow_mut().fill(T::zero());
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let v = self.inner.values.borrow();
        assert_eq!(v.len(), 1, "item() requires a single-element tensor");
        *v.iter().next().unwrap()
    }

    /// New constant leaf holding a copy of the values, cut off from the graph.
    pub fn detach(&self) -> Tensor<T> {
        Self::from_array(self.inner.values.borrow().clone())
    }

    pub(crate) fn accumulate_grad(&self, delta: &ArrayD<T>) {
        if self.inner.requires_grad {
            let mut g = self.inner.grad.borrow_mut();
            *g += delta;
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients of trainable leaves
    /// accumulate (`+=`) across calls; interior gradients are transient and
    /// reset on every call.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape()));
        }
        let order = self.topo_order();
        // Interior gradients are scratch space for this sweep only.
        for t in &order {
            t.inner.grad.borrow_mut().fill(T::zero());
        }
        if let Some(loss) = order.last() {
            loss.inner.grad.borrow_mut().fill(T::one());
        } else {
            // Loss is itself a leaf; nothing upstream to do.
            if self.inner.requires_grad {
                let mut g = self.inner.grad.borrow_mut();
                *g += &ArrayD::from_elem(self.inner.values.borrow().raw_dim(), T::one());
            }
            return Ok(());
        }
        for t in order.iter().rev() {
            let node = t.inner.node.as_ref().expect("topo order holds interior nodes");
            let g = t.inner.grad.borrow().clone();
            (node.backprop)(&g);
        }
        Ok(())
    }

    /// Post-order list of all interior (node-bearing) tensors reachable from
    /// `self`; `self` is last when it is interior. Iterative DFS, each node
    /// visited exactly once.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // (tensor, children_pushed)
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if t.inner.node.is_none() {
                continue;
            }
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.inner.id) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = t.inner.node.as_ref() {
                for input in &node.inputs {
                    if input.inner.node.is_some() && !visited.contains(&input.inner.id) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Zero the gradient buffers of the given tensors.
pub fn zero_grads<T: Scalar>(params: &[Tensor<T>]) {
    for p in params {
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;
    use ndarray::arr1;

    fn vec_tensor(v: &[f64], requires: bool) -> Tensor<f64> {
        let a = arr1(v).into_dyn();
        if requires {
            Tensor::param(a)
        } else {
            Tensor::from_array(a)
        }
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let x = vec_tensor(&[1.0, -2.0, 3.0], true);
        let loss = ops::sum_all(&x);
        loss.backward().unwrap();
        assert_eq!(x.grad().as_slice().unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn disconnected_leaf_keeps_zero_grad() {
        let x = vec_tensor(&[1.0, 2.0], true);
        let y = vec_tensor(&[3.0, 4.0], true);
        let loss = ops::sum_all(&x);
        loss.backward().unwrap();
        assert!(y.grad().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_requires_grad_leaf_never_accumulates() {
        let x = vec_tensor(&[1.0, 2.0], false);
        let y = ops::mul_scalar(&x, 3.0);
        // No input requires grad, so the graph is pruned entirely.
        assert!(y.is_leaf());
        assert!(!y.requires_grad());
        assert!(x.grad().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_on_non_scalar_is_an_error() {
        let x = vec_tensor(&[1.0, 2.0], true);
        let y = ops::mul_scalar(&x, 2.0);
        assert!(matches!(y.backward(), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn repeated_backward_accumulates_into_leaves() {
        let x = vec_tensor(&[2.0], true);
        let loss = ops::mean_all(&ops::mul(&x, &x).unwrap());
        loss.backward().unwrap();
        loss.backward().unwrap();
        // d(x^2)/dx = 2x = 4, accumulated twice.
        assert_eq!(x.grad()[0], 8.0);
    }

    #[test]
    fn shared_subexpression_accumulates_once_per_path() {
        // y = x*x + x  =>  dy/dx = 2x + 1, hand-unrolled two-path graph.
        let x = vec_tensor(&[3.0], true);
        let sq = ops::mul(&x, &x).unwrap();
        let y = ops::add(&sq, &x).unwrap();
        let loss = ops::sum_all(&y);
        loss.backward().unwrap();
        assert_eq!(x.grad()[0], 2.0 * 3.0 + 1.0);
    }

    #[test]
    fn aliased_clone_shares_storage() {
        let x = vec_tensor(&[1.0], true);
        let alias = x.clone();
        x.values_mut()[0] = 7.0;
        assert_eq!(alias.values()[0], 7.0);
        assert!(x.ptr_eq(&alias));
    }
}
