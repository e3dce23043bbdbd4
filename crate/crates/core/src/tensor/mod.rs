//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! Deliberately minimal: just enough machinery to train a small
//! convolutional denoiser on CPU. Values are row-major `Vec<f32>`;
//! gradients are recorded on a [`Tape`] and pulled back into leaf
//! tensors after [`Tape::backward`].

mod adam;
mod kernels;
mod tape;

pub use adam::{AdamConfig, AdamState, Param};
pub use tape::{EwKind, NodeId, Tape};

use std::fmt;

/// Errors from tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TensorError {
    /// Element count does not match the product of the dimensions.
    BadShape { shape: Vec<usize>, len: usize },
    /// Two operands whose shapes can neither match nor broadcast.
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    /// Convolution input and kernel disagree on channel count.
    ChannelMismatch { input: usize, kernel: usize },
    /// Convolution geometry yields an empty output.
    BadConvGeometry { input: Vec<usize>, kernel: Vec<usize>, stride: usize, padding: usize },
    /// `backward` called on a non-scalar node.
    NonScalarLoss { shape: Vec<usize> },
    /// Group normalization with a group count that does not divide the channels.
    BadGroupCount { channels: usize, groups: usize },
    /// Spatial dims not divisible as required by a pooling or network constraint.
    SpatialIndivisible { h: usize, w: usize, factor: usize },
    /// A non-finite gradient was encountered for the named parameter.
    NanGradient { name: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::BadShape { shape, len } => {
                write!(f, "shape {:?} implies {} elements, got {}", shape, shape.iter().product::<usize>(), len)
            }
            TensorError::ShapeMismatch { left, right } => {
                write!(f, "shape mismatch: {:?} vs {:?}", left, right)
            }
            TensorError::ChannelMismatch { input, kernel } => {
                write!(f, "channel mismatch: input has {} channels, kernel expects {}", input, kernel)
            }
            TensorError::BadConvGeometry { input, kernel, stride, padding } => {
                write!(
                    f,
                    "convolution of input {:?} with kernel {:?} (stride {}, padding {}) has empty output",
                    input, kernel, stride, padding
                )
            }
            TensorError::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {:?}", shape)
            }
            TensorError::BadGroupCount { channels, groups } => {
                write!(f, "{} groups do not divide {} channels", groups, channels)
            }
            TensorError::SpatialIndivisible { h, w, factor } => {
                write!(f, "spatial dims {}x{} not divisible by {}", h, w, factor)
            }
            TensorError::NanGradient { name } => {
                write!(f, "non-finite gradient for parameter `{}`", name)
            }
        }
    }
}

impl std::error::Error for TensorError {}

/// An n-dimensional f32 array in row-major layout.
///
/// Invariant: `data.len() == shape.iter().product()`, and `grad`, when
/// present, has the same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(TensorError::BadShape { shape: shape.to_vec(), len: data.len() });
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f(i)).collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Reinterpret as a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(TensorError::BadShape { shape: shape.to_vec(), len: self.data.len() });
        }
        let mut out = self.clone();
        out.shape = shape.to_vec();
        out.grad = None;
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Elementwise combine with an equal-shaped tensor.
    pub fn zip(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch { left: self.shape.clone(), right: other.shape.clone() });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data, requires_grad: false, grad: None })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    /// Maximum absolute difference against an equal-shaped tensor.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn mean(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        let s: f64 = self.data.iter().map(|&v| v as f64).sum();
        (s / self.data.len() as f64) as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_element_count() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::BadShape { .. }));
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[4, 2]).is_err());
    }
}
