use crate::{Float, Gradients, Tape, Tensor, TensorError, Var};

/// Ordered collection of named parameter tensors.
///
/// Order is fixed at construction; models refer to parameters by position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Float = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    /// Appends a trainable parameter and returns its position.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Replaces the value of parameter `i`, keeping its gradient flag.
    pub fn set_data(&mut self, i: usize, data: Tensor<T>) -> Result<(), TensorError> {
        let cur = &mut self.tensors[i];
        if cur.shape() != data.shape() {
            return Err(TensorError::Shape { op: "set_data", lhs: cur.shape().to_vec(), rhs: data.shape().to_vec() });
        }
        let rg = cur.requires_grad();
        *cur = data.with_requires_grad(rg);
        Ok(())
    }

    /// Registers every parameter on `tape` as a leaf, in store order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t)).collect()
    }

    /// Adds the gradients of a previous [`bind`](Self::bind) into each parameter.
    pub fn accumulate_grads(&mut self, vars: &[Var], grads: &Gradients<T>) -> Result<(), TensorError> {
        if vars.len() != self.tensors.len() {
            return Err(TensorError::Contract("bound variables do not match the parameter store"));
        }
        for (t, v) in self.tensors.iter_mut().zip(vars) {
            if let Some(g) = grads.get(*v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.tensors.iter_mut().for_each(|t| t.set_requires_grad(flag));
    }

    pub fn any_requires_grad(&self) -> bool {
        self.tensors.iter().any(Tensor::requires_grad)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Fails with the first parameter holding a NaN or infinite gradient.
    pub fn check_grads_finite(&self) -> Result<(), TensorError> {
        for (name, t) in self.iter() {
            if let Some(g) = t.grad() {
                if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                    return Err(TensorError::NonFiniteGradient { name: name.to_string(), index });
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// True when names, shapes and values match exactly (bitwise for values).
    pub fn bit_identical(&self, other: &ParamStore<T>) -> bool {
        self.names == other.names
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}
