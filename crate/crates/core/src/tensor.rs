//! Dense n-dimensional tensor of `f64` values, the currency of all numerics.
//!
//! A `Tensor` is a plain value: flat row-major data plus a shape. Gradients
//! live in an optional buffer of the same length and are only populated by
//! pulling them off a [`crate::tape::Tape`] after a backward pass.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
            grad: None,
            requires_grad: false,
        }
    }

    /// Centered uniform init scaled by fan-in, `U(-sqrt(6/fan_in), +sqrt(6/fan_in))`.
    pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient length {} does not match tensor length {}",
                g.len(),
                self.data.len()
            )));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (dst, src) in grad.iter_mut().zip(g) {
            *dst += src;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// True when every element is finite (no NaN or infinity).
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn from_vec_rejects_shape_mismatch() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::zeros(&[3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn he_uniform_is_deterministic_per_seed() {
        let a = Tensor::he_uniform(&[4, 4], 16, &mut ChaCha8Rng::seed_from_u64(9));
        let b = Tensor::he_uniform(&[4, 4], 16, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.data(), b.data());
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() < bound));
    }
}
