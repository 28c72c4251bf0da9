use std::cell::{Cell, Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

pub const MAX_RANK: usize = 4;

/// Dense row-major extents, rank 0 (scalar) through 4.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() > MAX_RANK {
            return Err(CoreError::shape(format!(
                "rank {} exceeds maximum {}",
                dims.len(),
                MAX_RANK
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(CoreError::shape(format!("zero extent in shape {:?}", dims)));
        }
        Ok(Shape {
            dims: dims.to_vec(),
        })
    }

    pub fn scalar() -> Self {
        Shape { dims: Vec::new() }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.dims)
    }
}

struct Inner<S: Scalar> {
    id: u64,
    shape: Shape,
    data: RefCell<Vec<S>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<S>>>,
}

/// A dense tensor handle. Cloning is cheap and aliases the same storage,
/// so a parameter held by a model and by an optimizer stays in sync.
///
/// `data` and `grad` live in separate cells: backward reads values while
/// it accumulates gradients into the same tensors.
pub struct Tensor<S: Scalar> {
    inner: Rc<Inner<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={}, requires_grad={})",
            self.inner.id,
            self.inner.shape,
            self.needs_grad()
        )
    }
}

fn next_id() -> u64 {
    thread_local! {
        static COUNTER: Cell<u64> = const { Cell::new(0) };
    }
    COUNTER.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(data: Vec<S>, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(CoreError::shape(format!(
                "shape {} expects {} elements, got {}",
                shape,
                shape.numel(),
                data.len()
            )));
        }
        Ok(Self::from_parts(shape, data))
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(Self::from_parts(shape, vec![S::zero(); n]))
    }

    pub fn filled(dims: &[usize], value: S) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(Self::from_parts(shape, vec![value; n]))
    }

    pub fn scalar(value: S) -> Self {
        Self::from_parts(Shape::scalar(), vec![value])
    }

    fn from_parts(shape: Shape, data: Vec<S>) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(false),
                grad: RefCell::new(None),
            }),
        }
    }

    /// Builder-style flag setter, handy when creating parameters.
    pub fn requires_grad(self, yes: bool) -> Self {
        self.inner.requires_grad.set(yes);
        self
    }

    pub fn set_requires_grad(&self, yes: bool) {
        self.inner.requires_grad.set(yes);
    }

    pub fn needs_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &Shape {
        &self.inner.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.inner.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.rank()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.numel()
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.inner.data.borrow()
    }

    pub fn data_mut(&self) -> RefMut<'_, Vec<S>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.inner.data.borrow().clone()
    }

    pub fn set_data(&self, data: Vec<S>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(CoreError::shape(format!(
                "set_data: expected {} elements, got {}",
                self.numel(),
                data.len()
            )));
        }
        *self.inner.data.borrow_mut() = data;
        Ok(())
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    // gradient buffer

    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    /// Gradient buffer contents, zeros when no gradient was ever accumulated.
    pub fn grad_or_zeros(&self) -> Vec<S> {
        self.grad().unwrap_or_else(|| vec![S::zero(); self.numel()])
    }

    pub fn has_grad(&self) -> bool {
        self.inner.grad.borrow().is_some()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = Some(vec![S::zero(); self.numel()]);
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Sum `delta` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&self, delta: &[S]) {
        debug_assert_eq!(delta.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (g, d) in buf.iter_mut().zip(delta) {
                    *g = *g + *d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rejects_rank_5() {
        assert!(Shape::new(&[1, 1, 1, 1, 1]).is_err());
    }

    #[test]
    fn shape_rejects_zero_extent() {
        assert!(Shape::new(&[2, 0]).is_err());
    }

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::from_vec(vec![1.0f64, 2.0], &[3]).is_err());
        let t = Tensor::from_vec(vec![1.0f64, 2.0, 3.0], &[3]).unwrap();
        assert_eq!(t.numel(), 3);
    }

    #[test]
    fn grad_accumulates_by_summation() {
        let t = Tensor::from_vec(vec![1.0f64, 2.0], &[2]).unwrap();
        t.accumulate_grad(&[1.0, 1.0]);
        t.accumulate_grad(&[0.5, -1.0]);
        assert_eq!(t.grad().unwrap(), vec![1.5, 0.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn clones_alias_storage() {
        let t = Tensor::from_vec(vec![1.0f32], &[1]).unwrap();
        let u = t.clone();
        u.set_data(vec![5.0]).unwrap();
        assert_eq!(t.item(), 5.0);
        assert!(t.ptr_eq(&u));
    }
}
