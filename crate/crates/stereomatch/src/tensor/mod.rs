//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle onto an immutable, row-major value buffer.
//! Operations build a computation graph on the fly; [`autograd::backward`]
//! replays the recorded operations in reverse to populate gradients.
//! Training and inference run in `f32`; gradient-check tooling instantiates
//! the same code with `f64` (see [`gradcheck`]).

pub mod autograd;
pub mod gradcheck;
pub mod ops;

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::ops::Deref;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::Float;

use crate::audit::mem;
use crate::error::{Error, Result};

/// Element types the engine is instantiated with.
pub trait Scalar:
    Float + num_traits::NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Shorthand for converting literals into the active scalar type.
pub(crate) fn sc<T: Scalar>(x: f64) -> T {
    T::from_f64(x)
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Value buffer that reports its size to the memory audit.
pub(crate) struct Buffer<T> {
    v: Vec<T>,
}

impl<T> Buffer<T> {
    pub(crate) fn new(v: Vec<T>) -> Self {
        mem::alloc((v.capacity() * std::mem::size_of::<T>()) as u64);
        Buffer { v }
    }
}

impl<T> Deref for Buffer<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.v
    }
}

impl<T> Drop for Buffer<T> {
    fn drop(&mut self) {
        mem::free((self.v.capacity() * std::mem::size_of::<T>()) as u64);
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: std::cell::Cell<bool> = const { std::cell::Cell::new(true) };
}

/// True when operations should record themselves for differentiation.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Run `f` with gradient recording disabled. Iterative inference relies on
/// this to keep per-step memory independent of the iteration count.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    GRAD_ENABLED.with(|g| {
        let prev = g.get();
        g.set(false);
        let r = f();
        g.set(prev);
        r
    })
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) id: u64,
    pub(crate) data: Buffer<T>,
    pub(crate) shape: Vec<usize>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: RefCell<Option<Buffer<T>>>,
    pub(crate) op: Option<autograd::OpRecord<T>>,
}

/// Handle to an immutable tensor value plus its autograd bookkeeping.
pub struct Tensor<T: Scalar> {
    pub(crate) node: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            self.shape(),
            self.is_requires_grad()
        )
    }
}

impl<T: Scalar> Tensor<T> {
    pub(crate) fn leaf(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                data: Buffer::new(data),
                shape,
                requires_grad,
                grad: RefCell::new(None),
                op: None,
            }),
        }
    }

    /// Build a tensor from row-major data.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::contract(
                "from_vec",
                format!("{} values for shape {shape:?}", data.len()),
            ));
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(vec![T::zero(); numel(shape)], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::leaf(vec![value; numel(shape)], shape.to_vec(), false)
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![value], vec![1], false)
    }

    /// Mark this (leaf) tensor as requiring a gradient.
    pub fn requires_grad(self) -> Self {
        if self.node.requires_grad {
            return self;
        }
        assert!(
            self.node.op.is_none(),
            "requires_grad may only be set on leaf tensors"
        );
        let data = self.node.data.to_vec();
        Self::leaf(data, self.node.shape.clone(), true)
    }

    /// A gradient-free copy sharing no graph history.
    pub fn detach(&self) -> Self {
        Self::leaf(self.node.data.to_vec(), self.node.shape.clone(), false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn len(&self) -> usize {
        self.node.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn is_requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// The gradient populated by the last backward pass, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().as_ref().map(|g| g.to_vec())
    }

    /// Drop any stored gradient (the per-spec "reset").
    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Scale the stored gradient in place (gradient clipping).
    pub(crate) fn scale_grad(&self, factor: T) {
        if let Some(g) = self.node.grad.borrow_mut().as_mut() {
            for v in g.v.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1, "item() on tensor with {} elements", self.len());
        self.node.data[0]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.node.data.iter()
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.node.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.node
            .data
            .iter()
            .fold(0.0f64, |m, v| m.max(v.as_f64().abs()))
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[T]) {
        debug_assert_eq!(contrib.len(), self.len());
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (a, b) in g.v.iter_mut().zip(contrib) {
                    *a += *b;
                }
            }
            None => *slot = Some(Buffer::new(contrib.to_vec())),
        }
    }

    /// Convert elementwise into another scalar type (losing graph history).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self
            .node
            .data
            .iter()
            .map(|v| U::from_f64(v.as_f64()))
            .collect();
        Tensor::leaf(data, self.node.shape.clone(), false)
    }
}

/// A mutable slot holding a leaf tensor: model weights and norm statistics.
///
/// Optimizer steps and checkpoint loads replace the stored value; the
/// tensors themselves stay immutable.
pub struct Param<T: Scalar> {
    inner: Rc<ParamInner<T>>,
}

struct ParamInner<T: Scalar> {
    value: RefCell<Tensor<T>>,
    trainable: bool,
}

impl<T: Scalar> Clone for Param<T> {
    fn clone(&self) -> Self {
        Param {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Param {
            inner: Rc::new(ParamInner {
                value: RefCell::new(value.requires_grad()),
                trainable: true,
            }),
        }
    }

    /// Non-trainable state such as batch-norm running statistics.
    pub fn buffer(value: Tensor<T>) -> Self {
        Param {
            inner: Rc::new(ParamInner {
                value: RefCell::new(value),
                trainable: false,
            }),
        }
    }

    pub fn get(&self) -> Tensor<T> {
        self.inner.value.borrow().clone()
    }

    /// Replace the stored value, preserving trainability.
    pub fn set(&self, t: Tensor<T>) {
        let t = if self.inner.trainable {
            t.requires_grad()
        } else {
            t
        };
        *self.inner.value.borrow_mut() = t;
    }

    pub fn trainable(&self) -> bool {
        self.inner.trainable
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.value.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.inner.value.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.value.borrow().grad()
    }

    pub fn zero_grad(&self) {
        self.inner.value.borrow().zero_grad();
    }
}

/// Visitor callback used to enumerate model state by hierarchical name.
pub type ParamVisitor<'a, T> = dyn FnMut(&str, &Param<T>) + 'a;
