//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shape plus a flat row-major buffer of 64-bit floats.
//! Values are immutable once created; the only mutable state is the gradient
//! buffer (written during [`Tape::backward`]) and explicit parameter updates
//! between passes via [`Tensor::update_data`]. Operations live in [`ops`]
//! and record backward rules on an explicit [`Tape`], so independent tapes
//! can run on separate threads with no shared mutable state.

pub mod kernels;
pub mod ops;
pub(crate) mod scalar;
pub(crate) mod serialize;
mod tape;

pub use serialize::{read_tensor, write_tensor};
pub use tape::Tape;

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Shared handle to a tensor. Cloning is cheap and aliases the same storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::Dimension(format!(
            "shape extents must be >= 1, got {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// Build a tensor from a flat row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel = check_shape(shape)?;
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} elements but buffer holds {}",
                data.len()
            )));
        }
        Ok(Self::new_raw(shape.to_vec(), data, false))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = check_shape(shape).expect("invalid shape");
        Self::new_raw(shape.to_vec(), vec![0.0; numel], false)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        let numel = check_shape(shape).expect("invalid shape");
        Self::new_raw(shape.to_vec(), vec![1.0; numel], false)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel = check_shape(shape).expect("invalid shape");
        Self::new_raw(shape.to_vec(), vec![value; numel], false)
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Tensor {
        Self::new_raw(Vec::new(), vec![value], false)
    }

    /// N(0, std^2) samples.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
        let numel = check_shape(shape).expect("invalid shape");
        let dist = Normal::new(0.0, std).expect("std must be finite and positive");
        let data = (0..numel).map(|_| dist.sample(rng)).collect();
        Self::new_raw(shape.to_vec(), data, false)
    }

    /// U(lo, hi) samples.
    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
        let numel = check_shape(shape).expect("invalid shape");
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Self::new_raw(shape.to_vec(), data, false)
    }

    pub(crate) fn new_raw(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                requires_grad,
                grad: None,
            })),
        }
    }

    /// Mark as a trainable parameter (gradient will be populated by
    /// `Tape::backward`). Returns `self` for chaining.
    pub fn as_param(self) -> Tensor {
        self.inner.borrow_mut().requires_grad = true;
        self
    }

    pub fn set_requires_grad(&self, yes: bool) {
        self.inner.borrow_mut().requires_grad = yes;
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Borrow the flat data buffer.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn data_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on a non-scalar tensor");
        inner.data[0]
    }

    /// Copy of the gradient buffer, if any has been accumulated.
    pub fn grad_vec(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    /// Borrow the gradient buffer (None until something accumulated into it).
    pub fn grad(&self) -> Ref<'_, Option<Vec<f64>>> {
        Ref::map(self.inner.borrow(), |i| &i.grad)
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Add `g` elementwise into the gradient buffer, allocating zeros first
    /// if no gradient exists yet.
    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        debug_assert_eq!(g.len(), inner.data.len());
        match inner.grad.as_mut() {
            Some(buf) => {
                for (dst, src) in buf.iter_mut().zip(g) {
                    *dst += src;
                }
            }
            None => inner.grad = Some(g.to_vec()),
        }
    }

    /// Mutate the value buffer in place. Reserved for parameter updates
    /// between forward/backward passes and for finite-difference probing;
    /// calling it while a tape referencing this tensor is still live
    /// invalidates that tape's saved forward values.
    pub fn update_data<F: FnOnce(&mut [f64])>(&self, f: F) {
        f(&mut self.inner.borrow_mut().data);
    }

    /// Copy of the value with no gradient tracking.
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Self::new_raw(inner.shape.clone(), inner.data.clone(), false)
    }

    /// Do `self` and `other` alias the same storage?
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .field("numel", &inner.data.len())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_shape() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::from_vec(&[2, 3], vec![0.0; 5]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Tensor::from_vec(&[2, 0], vec![]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn scalar_is_rank_zero() {
        let s = Tensor::scalar(4.5);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 4.5);
    }

    #[test]
    fn grad_accumulates_additively() {
        let t = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap().as_param();
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        t.accumulate_grad(&[0.5, 0.5, 0.5]);
        assert_eq!(t.grad_vec().unwrap(), vec![1.5, 1.5, 1.5]);
        t.zero_grad();
        assert!(t.grad_vec().is_none());
    }

    #[test]
    fn clone_aliases_storage() {
        let t = Tensor::zeros(&[2, 2]);
        let u = t.clone();
        assert!(t.same_storage(&u));
        u.update_data(|d| d[0] = 7.0);
        assert_eq!(t.data()[0], 7.0);
    }
}
