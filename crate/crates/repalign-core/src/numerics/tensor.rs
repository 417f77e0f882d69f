//! Dense row-major `f32` tensor. Deliberately minimal: shape bookkeeping and
//! bulk access only. All arithmetic lives on the tape so that every compute
//! path is differentiable and finite-checked in one place.

use crate::error::{shape_err, Result};
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err(
                "tensor.new",
                alloc::format!("shape {:?} wants {} elements, got {}", shape, numel, data.len()),
            );
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: alloc::vec![0.0; numel], requires_grad: false }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: alloc::vec![value; numel], requires_grad: false }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: alloc::vec![1], data: alloc::vec![value], requires_grad: false }
    }

    pub fn randn(shape: &[usize], rng: &mut super::rng::Rng) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: rng.normal_vec(numel), requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Size of the last axis; 1 for rank-0-like scalars.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all axes but the last: the row count when the tensor is
    /// viewed as a matrix over its trailing axis.
    pub fn leading(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return shape_err(
                "tensor.reshape",
                alloc::format!("cannot view {:?} as {:?}", self.shape, shape),
            );
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_accounting() {
        let t = Tensor::new(&[2, 3], alloc::vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(t.leading(), 2);
        assert_eq!(t.last_dim(), 3);
        assert!(Tensor::new(&[2, 3], alloc::vec![0.0; 5]).is_err());
        assert!(t.clone().reshaped(&[3, 2]).is_ok());
        assert!(t.reshaped(&[4, 2]).is_err());
    }

    #[test]
    fn finite_scan() {
        let mut t = Tensor::zeros(&[4]);
        assert!(t.is_finite());
        t.data_mut()[2] = f32::NAN;
        assert!(!t.is_finite());
    }
}
