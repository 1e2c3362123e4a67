//! Dense tensors and a tape-based reverse-mode differentiation engine.

pub mod kernels;
mod tape;

pub use tape::{CostScope, MacCounters, Tape, Var};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Row-major dense array of `f64` with an optional gradient buffer.
///
/// The gradient buffer exists exactly when `requires_grad` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            let z: f64 = rng.sample(StandardNormal);
            *v = z * std;
        }
        t
    }

    /// Marks the tensor trainable and allocates a zeroed gradient.
    pub fn trainable(mut self) -> Self {
        self.set_requires_grad(true);
        self
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        self.grad = if on { Some(vec![0.0; self.data.len()]) } else { None };
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.fill(0.0);
        }
    }

    /// Adds `delta` into the gradient buffer. No-op on frozen tensors.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        let Some(g) = &mut self.grad else {
            return Ok(());
        };
        if g.len() != delta.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[delta.len()]));
        }
        for (a, b) in g.iter_mut().zip(delta) {
            *a += b;
        }
        Ok(())
    }

    /// Rounds every entry to the nearest `f32`, the storage precision of
    /// weight files.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    /// Same shape and bit-for-bit identical data.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap();
        &self.data[i * cols..(i + 1) * cols]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numel_matches_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn grad_buffer_tracks_requires_grad() {
        let mut t = Tensor::zeros(&[3]);
        assert!(t.grad().is_none());
        t.set_requires_grad(true);
        t.accumulate_grad(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0, -2.0, 0.5]);
        t.zero_grad();
        assert!(t.grad().unwrap().iter().all(|&g| g == 0.0));
        t.set_requires_grad(false);
        assert!(t.grad().is_none());
        t.accumulate_grad(&[1.0, 1.0, 1.0]).unwrap();
        assert!(t.grad().is_none());
    }
}
