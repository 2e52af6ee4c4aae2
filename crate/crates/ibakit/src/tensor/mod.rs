//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation whose inputs participate in gradient
//! computation. Calling [`Tape::backward`] on a scalar loss replays the tape
//! in reverse and writes gradients into every participating [`Tensor`].
//! One tape per job; tapes are never shared between jobs or threads.

mod gradcheck;
mod ops;

pub use gradcheck::grad_check;
pub use ops::sigmoid_scalar;

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

struct TensorInner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    // true when this tensor takes part in the current tape's gradient flow,
    // either as a requires_grad leaf or as the output of a recorded op
    participates: bool,
}

/// Dense n-dimensional value, row-major, shared by handle.
///
/// Cloning a `Tensor` clones the handle, not the storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorInner>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "new",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self::raw(shape, data, false))
    }

    pub fn scalar(v: f64) -> Self {
        Self::raw(vec![], vec![v], false)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::raw(shape, vec![0.0; n], false)
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Self::raw(shape, vec![v; n], false)
    }

    fn raw(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(TensorInner {
                shape,
                data,
                requires_grad,
                grad: None,
                participates: requires_grad,
            })),
        }
    }

    pub fn with_grad(self) -> Self {
        {
            let mut inner = self.inner.borrow_mut();
            inner.requires_grad = true;
            inner.participates = true;
        }
        self
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> Result<f64> {
        let inner = self.inner.borrow();
        if inner.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                inner.shape
            )));
        }
        Ok(inner.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub(crate) fn participates(&self) -> bool {
        self.inner.borrow().participates
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Errors if the tensor holds any NaN or infinity.
    pub fn validate(&self) -> Result<()> {
        let inner = self.inner.borrow();
        if inner.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "non-finite value in tensor of shape {:?}",
                inner.shape
            )));
        }
        Ok(())
    }

    fn mark_participating(&self) {
        self.inner.borrow_mut().participates = true;
    }

    fn accumulate(&self, g: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        if !inner.participates {
            return;
        }
        let n = inner.data.len();
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; n]);
        for (gi, v) in grad.iter_mut().zip(g) {
            *gi += v;
        }
    }

    fn set_grad(&self, g: Vec<f64>) {
        self.inner.borrow_mut().grad = Some(g);
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        write!(f, "Tensor{:?} {:?}", inner.shape, inner.data)
    }
}

type BackwardStep = Box<dyn Fn()>;

/// Records operations for one gradient job.
///
/// Not thread-safe; a tape, and every tensor recorded on it, belongs to a
/// single job. Distinct jobs each build their own tape.
#[derive(Default)]
pub struct Tape {
    steps: RefCell<Vec<BackwardStep>>,
    spent: Cell<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.steps.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.borrow().is_empty()
    }

    fn record(&self, step: BackwardStep) {
        self.steps.borrow_mut().push(step);
    }

    /// True when any input participates; the output is then marked too.
    fn recording(&self, inputs: &[&Tensor]) -> bool {
        inputs.iter().any(|t| t.participates())
    }

    /// Propagates d(loss)/d(tensor) into every participating tensor.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if self.spent.get() {
            return Err(Error::Contract(
                "backward called twice on the same tape; build a fresh tape per job".into(),
            ));
        }
        self.spent.set(true);
        loss.set_grad(vec![1.0]);
        for step in self.steps.borrow().iter().rev() {
            step();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
