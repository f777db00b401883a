//! Dense row-major `f64` tensors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;

/// Initial contents for [`Tensor::create`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform on `(-bound, bound)`, reproducible from `seed`.
    Uniform { bound: f64, seed: u64 },
}

/// An n-dimensional array of `f64` in row-major order.
///
/// A tensor with an empty shape is a scalar holding one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

fn check_dims(shape: &[usize]) -> Result<usize, TensorError> {
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(TensorError::Shape(format!(
            "dimension {pos} of {shape:?} is zero"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn create(shape: &[usize], init: Init) -> Result<Self, TensorError> {
        let numel = check_dims(shape)?;
        let data = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Constant(c) => vec![c; numel],
            Init::Uniform { bound, seed } => {
                if !(bound > 0.0) || !bound.is_finite() {
                    return Err(TensorError::Shape(format!(
                        "uniform bound must be positive, got {bound}"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, TensorError> {
        Self::create(shape, Init::Zeros)
    }

    pub fn constant(shape: &[usize], value: f64) -> Result<Self, TensorError> {
        Self::create(shape, Init::Constant(value))
    }

    pub fn uniform(shape: &[usize], bound: f64, seed: u64) -> Result<Self, TensorError> {
        Self::create(shape, Init::Uniform { bound, seed })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let numel = check_dims(shape)?;
        if numel != data.len() {
            return Err(TensorError::Shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a `[rows.len(), cols]` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Shape("ragged rows".into()));
        }
        Self::from_vec(&[rows.len(), cols], rows.concat())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<(), TensorError> {
        if grad.len() != self.data.len() {
            return Err(TensorError::Shape(format!(
                "gradient of {} elements for tensor of shape {:?}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Element of a rank-2 tensor.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<f64, TensorError> {
        if self.data.len() != 1 {
            return Err(TensorError::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let cols = self.shape.last().copied().unwrap_or(1);
        self.data.chunks(cols)
    }
}
