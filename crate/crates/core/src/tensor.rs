//! Dense row-major tensor storage.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// N-dimensional array in row-major (C) order. Feature maps use NCHW.
///
/// A `Tensor` is plain storage: computation happens on a tape, which
/// copies tensor data into its own arena. The optional `grad` buffer is
/// filled back in by the training loop after a backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
}

/// Number of elements implied by a shape. Empty shape is a scalar.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Scalar> Tensor<F> {
    /// Builds a tensor, rejecting any shape/data length disagreement.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!(
                    "shape {:?} implies {} elements, data has {}",
                    shape,
                    numel(&shape),
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::ZERO; numel(shape)],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            grad: None,
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    /// Installs a gradient buffer; the length must match the data.
    pub fn set_grad(&mut self, grad: Vec<F>) {
        assert_eq!(grad.len(), self.data.len(), "grad length mismatch");
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Elementwise width conversion; drops any gradient.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.to_f64())).collect(),
            grad: None,
        }
    }

    /// Interprets the same data under a new shape with equal element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.data.len() {
            return Err(Error::shape(
                "Tensor::reshaped",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }
}

/// Splits an NCHW shape, rejecting other ranks.
pub fn dims4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        other => Err(Error::shape(
            op,
            format!("expected 4-d NCHW input, got {:?}", other),
        )),
    }
}

/// Splits an ND (rows, features) shape.
pub fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [n, d] => Ok((*n, *d)),
        other => Err(Error::shape(
            op,
            format!("expected 2-d input, got {:?}", other),
        )),
    }
}
