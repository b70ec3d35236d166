use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::{Float, TensorError};

/// Dense row-major tensor.
///
/// A tensor is a plain value. It joins a computation only when registered
/// on a [`Tape`](crate::Tape); gradients computed there are written back with
/// [`Tensor::accumulate_grad`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Float = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self, TensorError> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength { shape, len: data.len() });
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let data = vec![T::zero(); numel(&shape)];
        Self { shape, data, requires_grad: false, grad: None }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let data = vec![value; numel(&shape)];
        Self { shape, data, requires_grad: false, grad: None }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![], data: vec![value], requires_grad: false, grad: None }
    }

    /// Standard normal entries.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, rng: &mut R) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape))
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                T::of(v)
            })
            .collect();
        Self { shape, data, requires_grad: false, grad: None }
    }

    /// Kaiming-uniform init: U(-b, b) with b = sqrt(6 / fan_in) / sqrt(1 + a²), a = sqrt(5)
    /// (the PyTorch default for linear and conv weights).
    pub fn kaiming_uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut R) -> Self {
        let shape = shape.into();
        let bound = (6.0 / fan_in.max(1) as f64).sqrt() / 6f64.sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..numel(&shape)).map(|_| T::of(dist.sample(rng))).collect();
        Self { shape, data, requires_grad: false, grad: None }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.set_requires_grad(flag);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Turning gradient tracking off also drops any stored gradient.
    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds `g` into the stored gradient. No-op when gradients are disabled.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<(), TensorError> {
        if g.len() != self.data.len() {
            return Err(TensorError::DataLength { shape: self.shape.clone(), len: g.len() });
        }
        if !self.requires_grad {
            return Ok(());
        }
        let n = self.data.len();
        let slot = self.grad.get_or_insert_with(|| vec![T::zero(); n]);
        for (s, v) in slot.iter_mut().zip(g) {
            *s = *s + *v;
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(TensorError::DataLength { shape, len: self.data.len() });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Element-type conversion. Gradient state is not carried over.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::Shape {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs())))
    }

    /// Copies batch element `i` (leading dimension) out as its own tensor.
    pub fn row(&self, i: usize) -> Result<Tensor<T>, TensorError> {
        let (&b, rest) = self
            .shape
            .split_first()
            .ok_or(TensorError::Contract("row() on a scalar"))?;
        if i >= b {
            return Err(TensorError::Contract("row index out of range"));
        }
        let stride = numel(rest);
        Tensor::new(rest.to_vec(), self.data[i * stride..(i + 1) * stride].to_vec())
    }

    /// Stacks equally shaped tensors along a new leading dimension.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>, TensorError> {
        let first = items.first().ok_or(TensorError::Contract("stack of nothing"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(TensorError::Shape {
                    op: "stack",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }
}
