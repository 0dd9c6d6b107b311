use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

use super::ops::Op;

/// Element type of the autodiff engine.
///
/// `f32` is the training default; `f64` is used by the finite-difference
/// harness and anywhere bit-stable reproduction matters.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("finite f64 literal")
    }

    fn to_f64_(self) -> f64 {
        <Self as num_traits::ToPrimitive>::to_f64(&self).expect("scalar to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Run `f` with graph recording suppressed (validation / inference passes).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    pub(crate) grad: RefCell<Option<Vec<T>>>,
    requires_grad: Cell<bool>,
    pub(crate) op: RefCell<Option<Op<T>>>,
}

/// An N-dimensional value node in the autodiff graph: row-major data plus an
/// optional gradient and an optional backward record. Cloning a `Tensor`
/// clones the handle, not the storage.
pub struct Tensor<T: Scalar> {
    pub(crate) inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub(crate) fn new_internal(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "data length must equal product of shape"
        );
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                op: RefCell::new(None),
            }),
        }
    }

    /// Leaf tensor that does not require gradients.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        Self::new_internal(shape.to_vec(), data, false)
    }

    /// Trainable leaf tensor (gradients accumulate here during backward).
    pub fn param(shape: &[usize], data: Vec<T>) -> Self {
        Self::new_internal(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(shape, vec![T::zero(); shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_vec(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec(&[1], vec![value])
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    /// Shape as (N, C, H, W); errors unless the tensor is 4-D.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.inner.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!("expected 4-D tensor, got {:?}", self.inner.shape))),
        }
    }

    /// Shape as (N, T, E); errors unless the tensor is 3-D.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match *self.inner.shape.as_slice() {
            [n, t, e] => Ok((n, t, e)),
            _ => Err(Error::shape(format!("expected 3-D tensor, got {:?}", self.inner.shape))),
        }
    }

    pub fn data(&self) -> std::cell::Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    pub fn data_mut(&self) -> std::cell::RefMut<'_, Vec<T>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().iter().map(|v| v.to_f64_()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.len() != 1 {
            return Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.inner.shape
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, value: bool) {
        self.inner.requires_grad.set(value);
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[T]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e = *e + *c;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    pub(crate) fn set_grad(&self, grad: Vec<T>) {
        *self.inner.grad.borrow_mut() = Some(grad);
    }

    pub(crate) fn take_op(&self) -> Option<Op<T>> {
        self.inner.op.borrow_mut().take()
    }

    pub(crate) fn has_op(&self) -> bool {
        self.inner.op.borrow().is_some()
    }

    /// Detached copy: same data, fresh leaf with no graph history.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::from_vec(&self.inner.shape, self.to_vec())
    }
}
