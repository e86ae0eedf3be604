//! Reverse-mode automatic differentiation over dense row-major arrays.
//!
//! A [`Graph`] is an append-only tape of eagerly evaluated operations.
//! [`backward`](Graph::backward) walks the tape once in reverse append order
//! and accumulates gradients additively, so a tensor used twice receives the
//! sum of both contributions. Learnable state lives in [`Param`] handles that
//! are registered into each graph as leaves; after backward the leaf
//! gradients are folded back into the shared parameter.

mod gradcheck;
mod graph;

pub use gradcheck::max_relative_error;
pub use graph::{Graph, Op, TensorId};

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: non-finite input rejected in strict mode")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("embedding id {id} out of vocabulary (size {vocab})")]
    OutOfVocab { id: usize, vocab: usize },
    #[error("{op}: invalid attribute: {reason}")]
    InvalidAttr { op: &'static str, reason: String },
}

/// Dense n-dimensional value with an optional accumulated gradient.
#[derive(Debug, Clone)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub requires_grad: bool,
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || shape.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "tensor",
                shape,
                reason: "extents must be positive".into(),
            });
        }
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                op: "tensor",
                shape,
                reason: format!("data length {} does not match", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); numel],
            requires_grad,
            grad: None,
        }
    }

    pub fn scalar(x: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Add `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[S]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self
            .grad
            .get_or_insert_with(|| vec![S::zero(); self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = S::zero());
        }
    }
}

/// Shared handle to a named learnable tensor.
///
/// Cloning the handle aliases the same storage; modules keep a `Param` per
/// weight and register it into every graph they build.
#[derive(Clone)]
pub struct Param<S> {
    name: Rc<str>,
    inner: Rc<RefCell<Tensor<S>>>,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, tensor: Tensor<S>) -> Self {
        Param {
            name: name.into().into(),
            inner: Rc::new(RefCell::new(tensor)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> Ref<'_, Tensor<S>> {
        self.inner.borrow()
    }

    pub fn value_mut(&self) -> RefMut<'_, Tensor<S>> {
        self.inner.borrow_mut()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.borrow_mut().requires_grad = flag;
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().zero_grad();
    }
}

impl<S> std::fmt::Debug for Param<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({})", self.name)
    }
}
