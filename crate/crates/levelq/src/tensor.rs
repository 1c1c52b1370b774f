//! Dense n-dimensional `f32` tensor, row-major.

use crate::error::{LqError, Result};

/// Dense row-major tensor of 32-bit reals.
///
/// Invariant: `shape.iter().product() == data.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(LqError::argument(format!(
                "shape {:?} expects {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension, i.e. the batch size for batched tensors.
    pub fn dim0(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Shape with the leading dimension stripped (per-sample shape).
    pub fn sample_shape(&self) -> &[usize] {
        &self.shape[1..]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Binary freeze mask over a weight tensor.
///
/// Bit 0 marks a quantized (frozen) weight, bit 1 a trainable one. The mask
/// always has the same element count as the tensor it guards.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub shape: Vec<usize>,
    pub bits: Vec<u8>,
}

impl Mask {
    /// All-trainable mask matching `shape`.
    pub fn ones(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, bits: vec![1; n] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Number of frozen (bit 0) entries.
    pub fn frozen_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 0).count()
    }

    pub fn all_frozen(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_shape_product() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn mask_counts() {
        let mut m = Mask::ones(vec![4]);
        assert_eq!(m.frozen_count(), 0);
        m.bits[1] = 0;
        m.bits[3] = 0;
        assert_eq!(m.frozen_count(), 2);
        assert!(!m.all_frozen());
    }
}
