//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Everything is `f64`, row-major, CPU-only. Differentiable computations run
//! through a [`Tape`]: each operation records enough to replay the chain rule
//! in reverse. Model parameters live outside the tape as plain [`Tensor`]
//! values and are re-registered as leaves at the start of every step.

mod tape;

pub use tape::{Tape, TensorId};

use crate::error::{Error, Result};

/// A dense n-dimensional array of `f64` scalars, row-major.
///
/// `grad` is populated for `requires_grad` tensors after a backward pass has
/// been absorbed from the tape they were bound to.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "tensor data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        if shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor trainable.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Sets all gradient entries to zero (allocating if absent).
    pub fn zero_grad(&mut self) {
        match self.grad {
            Some(ref mut g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }
}

/// Raw row-major matrix product: `a[m,k] * b[k,n]`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_mismatched_shape() {
        assert!(Tensor::new(vec![1.0, 2.0], vec![3]).is_err());
        assert!(Tensor::new(vec![], vec![0]).is_err());
        assert!(Tensor::new(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).is_ok());
    }

    #[test]
    fn matmul_raw_identity() {
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let x = vec![3.0, -1.0, 2.5, 7.0];
        assert_eq!(matmul_raw(&eye, &x, 2, 2, 2), x);
    }
}
