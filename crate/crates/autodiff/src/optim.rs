use crate::{Float, ParamStore, TensorError};

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    /// β = (0.9, 0.999), ε = 1e-8.
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Moment accumulators, one pair of vectors per parameter tensor.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    /// Rebuilds an optimizer from saved state.
    pub fn restore(lr: f64, step: u64, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) -> Result<Self, TensorError> {
        if first.len() != second.len() || first.iter().zip(&second).any(|(a, b)| a.len() != b.len()) {
            return Err(TensorError::Contract("adam moments disagree in layout"));
        }
        Ok(Self { step, first, second, ..Self::new(lr) })
    }

    /// One update using the gradients stored on `params`. Parameters without
    /// a gradient (frozen, or unreachable from the loss) are left untouched.
    /// Any non-finite gradient aborts before a single value is modified.
    pub fn step<T: Float>(&mut self, params: &mut ParamStore<T>) -> Result<(), TensorError> {
        params.check_grads_finite()?;
        if self.first.is_empty() {
            self.first = (0..params.len()).map(|i| vec![0.0; params.tensor(i).numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(TensorError::Contract("optimizer state does not match the parameter store"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let t = params.tensor_mut(i);
            if !t.requires_grad() {
                continue;
            }
            let Some(g) = t.grad().map(|g| g.to_vec()) else { continue };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let gj = g[j].as_f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *p = T::of(p.as_f64() - update);
            }
        }
        Ok(())
    }
}

/// `ema ← decay·ema + (1 − decay)·online`, elementwise.
pub fn ema_update<T: Float>(ema: &mut ParamStore<T>, online: &ParamStore<T>, decay: f64) -> Result<(), TensorError> {
    if !(0.0..1.0).contains(&decay) {
        return Err(TensorError::Config(format!("ema decay {decay} outside [0, 1)")));
    }
    if ema.len() != online.len() {
        return Err(TensorError::Contract("ema and online stores differ in layout"));
    }
    for i in 0..ema.len() {
        let src = online.tensor(i);
        let dst = ema.tensor_mut(i);
        if dst.shape() != src.shape() {
            return Err(TensorError::Shape { op: "ema_update", lhs: dst.shape().to_vec(), rhs: src.shape().to_vec() });
        }
        for (e, o) in dst.data_mut().iter_mut().zip(src.data()) {
            *e = T::of(decay * e.as_f64() + (1.0 - decay) * o.as_f64());
        }
    }
    Ok(())
}
