//! Dense row-major tensors. Values are immutable once constructed; clones are
//! cheap (shared payload), matching the single-writer / many-reader model.

use std::sync::Arc;

use super::elem::Elem;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Tensor<E: Elem> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Elem> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} does not match payload length {}",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![E::ZERO; numel])
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![value; numel])
    }

    pub fn scalar(value: E) -> Self {
        Tensor::new(vec![1], vec![value])
    }

    pub fn from_f32_slice(shape: Vec<usize>, data: &[f32]) -> Self {
        Tensor::new(shape, data.iter().map(|&x| E::from_f32(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.data.as_ref().clone()
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|x| x.to_f32()).collect()
    }

    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Reinterpret the payload under a new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.numel(), "reshape {:?} -> {:?}", self.shape, shape);
        Tensor {
            shape,
            data: Arc::clone(&self.data),
        }
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn validate_finite(&self, context: &str) -> Result<()> {
        for (i, &x) in self.data.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite value {x} at flat index {i} in {context}"
                )));
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor<E>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of shape and payload.
    pub fn bit_eq(&self, other: &Tensor<E>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }
}

impl<E: Elem> PartialEq for Tensor<E> {
    fn eq(&self, other: &Self) -> bool {
        self.bit_eq(other)
    }
}

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_invariant_holds() {
        let t = Tensor32::new(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    #[should_panic]
    fn shape_payload_mismatch_panics() {
        let _ = Tensor32::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn finite_validation_flags_nan() {
        let t = Tensor32::new(vec![2], vec![1.0, f32::NAN]);
        assert!(t.validate_finite("test").is_err());
        let ok = Tensor32::new(vec![2], vec![1.0, 2.0]);
        assert!(ok.validate_finite("test").is_ok());
    }
}
