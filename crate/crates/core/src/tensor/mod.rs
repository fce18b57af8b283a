//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! Storage is flat row-major; reshapes copy. The graph is rebuilt on every
//! forward pass: each op that consumes a recorded tensor appends a node
//! holding its operands and a backward rule. `backward` walks the nodes in
//! reverse topological order exactly once and deposits leaf gradients into
//! the owning [`Param`]'s accumulator.

mod autograd;
pub mod ops;
pub mod serialize;

pub use autograd::{backward, no_grad};

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use autograd::Node;
pub(crate) use autograd::BackwardFn;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) fn set_grad_enabled(on: bool) -> bool {
    GRAD_ENABLED.with(|g| g.replace(on))
}

/// Dense n-dimensional array of 64-bit reals, optionally attached to the
/// autodiff graph. Cloning is cheap (shared storage); data is immutable once
/// the producing op has written it.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<Rc<Node>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data: Rc::new(data), node: None })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::dim("from_rows: ragged row lengths".to_string()));
        }
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        Tensor::from_vec(vec![m, n], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: Rc::new(vec![0.0; numel]), node: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: Rc::new(vec![value]), node: None }
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

    /// Row count of a rank-2 tensor (rank-1 counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            1 => 1,
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    /// Column count of a rank-2 tensor (rank-1 counts as its length).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    /// Same data, severed from the autodiff graph.
    pub fn detach(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Rc::clone(&self.data), node: None }
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Debug-mode NaN/Inf detection.
    pub fn assert_finite(&self, what: &str) {
        debug_assert!(
            self.data.iter().all(|v| v.is_finite()),
            "non-finite value in {what}"
        );
    }

    pub(crate) fn node(&self) -> Option<&Rc<Node>> {
        self.node.as_ref()
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.data)
    }

    /// Build an op-result tensor. `parents` must be nonempty; `back` receives
    /// the output gradient and one zeroed buffer per parent, in order.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Rc<Node>>,
        back: BackwardFn,
    ) -> Tensor {
        debug_assert!(!parents.is_empty());
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let len = data.len();
        Tensor {
            shape,
            data: Rc::new(data),
            node: Some(Rc::new(Node::op(len, parents, back))),
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("recorded", &self.node.is_some())
            .finish()
    }
}

/// A trainable leaf: persistent value plus a gradient accumulator that
/// `backward` deposits into. Values mutate copy-on-write, so tensors captured
/// by an in-flight graph keep the values they were computed from.
pub struct Param {
    shape: Vec<usize>,
    data: RefCell<Rc<Vec<f64>>>,
    grad: Rc<RefCell<Vec<f64>>>,
}

impl Param {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "param shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Param {
            shape,
            data: RefCell::new(Rc::new(data)),
            grad: Rc::new(RefCell::new(vec![0.0; numel])),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Current value as a graph leaf. Records onto the tape unless gradient
    /// recording is disabled (see [`no_grad`]).
    pub fn tensor(&self) -> Tensor {
        let data = Rc::clone(&self.data.borrow());
        let node = if grad_enabled() {
            Some(Rc::new(Node::leaf(data.len(), Rc::clone(&self.grad))))
        } else {
            None
        };
        Tensor { shape: self.shape.clone(), data, node }
    }

    pub fn value(&self) -> Vec<f64> {
        self.data.borrow().as_ref().clone()
    }

    /// Shared handle to the current value (no copy).
    pub fn value_rc(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.data.borrow())
    }

    pub fn set_value(&self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::dim(format!(
                "param expects {} elements, got {}",
                self.numel(),
                data.len()
            )));
        }
        *self.data.borrow_mut() = Rc::new(data);
        Ok(())
    }

    /// Mutate the value in place (copy-on-write if a live tensor still holds it).
    pub fn update(&self, f: impl FnOnce(&mut [f64])) {
        let mut slot = self.data.borrow_mut();
        f(Rc::make_mut(&mut slot).as_mut_slice());
    }

    pub fn grad(&self) -> Vec<f64> {
        self.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        self.grad.borrow_mut().iter_mut().for_each(|g| *g = 0.0);
    }

    /// Apply `f(value, grad)` elementwise-capable access for optimizers.
    pub fn apply_grad(&self, f: impl FnOnce(&mut [f64], &[f64])) {
        let grad = self.grad.borrow();
        let mut slot = self.data.borrow_mut();
        f(Rc::make_mut(&mut slot).as_mut_slice(), &grad);
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Param").field("shape", &self.shape).finish()
    }
}
