use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::op::Op;
use crate::rng::RngState;

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on the current thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(false));
        Self { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) struct Node<T: Element> {
    pub(crate) id: usize,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: RefCell<Vec<T>>,
    pub(crate) grad: RefCell<Option<Vec<T>>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
    pub(crate) parents: Vec<Tensor<T>>,
}

/// Dense row-major tensor. Cloning is cheap and shares the underlying node,
/// so a clone observes parameter updates and accumulated gradients.
pub struct Tensor<T: Element = f64>(pub(crate) Rc<Node<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_finite<T: Element>(data: &[T], op: &'static str) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl<T: Element> Tensor<T> {
    fn make(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Op<T>, parents: Vec<Self>) -> Self {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            op,
            parents,
        }))
    }

    /// Result of a differentiable op. Records the op only when a parent
    /// tracks gradients and recording is enabled.
    pub(crate) fn from_op(
        name: &'static str,
        data: Vec<T>,
        shape: Vec<usize>,
        op: Op<T>,
        parents: Vec<Self>,
    ) -> Result<Self> {
        debug_assert_eq!(data.len(), numel(&shape), "{name}");
        check_finite(&data, name)?;
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        Ok(if track {
            Self::make(shape, data, true, op, parents)
        } else {
            Self::make(shape, data, false, Op::Leaf, Vec::new())
        })
    }

    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(TensorError::BufferLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        if shape.iter().any(|&s| s == 0) {
            return Err(TensorError::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: "extents must be positive".into(),
            });
        }
        check_finite(&data, "from_vec")?;
        Ok(Self::make(shape.to_vec(), data, false, Op::Leaf, Vec::new()))
    }

    pub fn from_f64s(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&x| T::of_f64(x)).collect(), shape)
    }

    pub fn scalar(value: f64) -> Self {
        Self::make(Vec::new(), vec![T::of_f64(value)], false, Op::Leaf, Vec::new())
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::make(
            shape.to_vec(),
            vec![T::of_f64(value); numel(shape)],
            false,
            Op::Leaf,
            Vec::new(),
        )
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self::make(vec![n, n], data, false, Op::Leaf, Vec::new())
    }

    /// i.i.d. `N(0, std^2)` entries; advances `rng` by exactly `numel(shape)`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut RngState) -> Self {
        let data = (0..numel(shape))
            .map(|_| T::of_f64(std * rng.normal()))
            .collect();
        Self::make(shape.to_vec(), data, false, Op::Leaf, Vec::new())
    }

    /// A fresh leaf sharing no graph history with `self`.
    pub fn detach(&self) -> Self {
        Self::make(self.shape().to_vec(), self.to_vec(), false, Op::Leaf, Vec::new())
    }

    /// A fresh leaf copy that records gradients (a trainable parameter).
    pub fn into_param(self) -> Self {
        Self::make(self.shape().to_vec(), self.to_vec(), true, Op::Leaf, Vec::new())
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn same_node(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.0.op, Op::Leaf)
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.borrow().iter().map(|x| x.as_f64()).collect()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        d[0].as_f64()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrites the stored values in place (parameter updates, checkpoint
    /// loading). Graph nodes already built from this tensor keep their cached
    /// outputs.
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(TensorError::BufferLength {
                len: data.len(),
                shape: self.shape().to_vec(),
            });
        }
        check_finite(&data, "set_data")?;
        *self.0.data.borrow_mut() = data;
        Ok(())
    }

    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.0.data.borrow_mut());
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => *slot = Some(g.to_vec()),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.0.data.borrow();
        let preview: Vec<_> = d.iter().take(8).collect();
        write!(
            f,
            "Tensor<{}>(shape={:?}, requires_grad={}, data={:?}{})",
            T::NAME,
            self.0.shape,
            self.0.requires_grad,
            preview,
            if d.len() > 8 { ", .." } else { "" }
        )
    }
}
