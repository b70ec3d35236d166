//! Discrete noise schedule with zero terminal SNR and the v-parameterization
//! coefficient algebra.
//!
//! Timesteps are 1-indexed: `t ∈ 1..=T`. Storage is 0-indexed, so `ᾱ_t`
//! lives at `alpha_bar[t - 1]`.
//!
//! All conversions exist twice: once on plain tensors (sampler, oracles) and
//! once on a [`Tape`] (training objectives). Both evaluate the same f32
//! expressions in the same order, so they agree bitwise.

use difflab_autodiff::{Float, Tape, Tensor, TensorError, Var};

use crate::error::{LabError, Result};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 0.00085;
pub const DEFAULT_BETA_END: f64 = 0.012;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    sqrt_alpha_bar: Vec<f64>,
    sqrt_one_minus_alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::zero_terminal_snr(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    /// Linear β from `beta_start` to `beta_end`, cumulative product to ᾱ, then
    /// shift and scale √ᾱ so the last entry is exactly zero while the first
    /// is unchanged.
    pub fn zero_terminal_snr(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(LabError::config(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(LabError::config(format!(
                "beta range must satisfy 0 < start < end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let mut sqrt_ab = Vec::with_capacity(steps);
        let mut cum = 1.0;
        for i in 0..steps {
            let beta = beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64;
            cum *= 1.0 - beta;
            sqrt_ab.push(cum.sqrt());
        }
        let first = sqrt_ab[0];
        let last = sqrt_ab[steps - 1];
        for s in sqrt_ab.iter_mut() {
            *s = first * ((*s - last) / (first - last));
        }
        sqrt_ab[steps - 1] = 0.0;
        Ok(Self::from_sqrt_alpha_bar(sqrt_ab))
    }

    /// Builds a schedule from an explicit ᾱ table (`alpha_bar[0]` is ᾱ_1).
    /// Values must lie in `[0, 1]`; monotonicity is not enforced so tests can
    /// probe hypothetical endpoints such as ᾱ = 1.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() || alpha_bar.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(LabError::config("alpha_bar entries must lie in [0, 1]"));
        }
        Ok(Self::from_sqrt_alpha_bar(alpha_bar.iter().map(|a| a.sqrt()).collect()))
    }

    fn from_sqrt_alpha_bar(sqrt_alpha_bar: Vec<f64>) -> Self {
        let alpha_bar: Vec<f64> = sqrt_alpha_bar.iter().map(|s| s * s).collect();
        let sqrt_one_minus_alpha_bar = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Self { alpha_bar, sqrt_alpha_bar, sqrt_one_minus_alpha_bar }
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(LabError::contract(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.sqrt_alpha_bar[t - 1]
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> f64 {
        self.sqrt_one_minus_alpha_bar[t - 1]
    }

    /// ᾱ_t / (1 − ᾱ_t); infinite where ᾱ_t = 1.
    pub fn snr(&self, t: usize) -> f64 {
        let a = self.alpha_bar(t);
        a / (1.0 - a)
    }

    pub fn alpha_bar_table(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Per-timestep (√ᾱ, √(1−ᾱ)) cast to the tensor element type.
    pub fn coefficients<T: Float>(&self, ts: &[usize]) -> Result<(Vec<T>, Vec<T>)> {
        let mut a = Vec::with_capacity(ts.len());
        let mut b = Vec::with_capacity(ts.len());
        for &t in ts {
            self.check(t)?;
            a.push(T::of(self.sqrt_alpha_bar(t)));
            b.push(T::of(self.sqrt_one_minus_alpha_bar(t)));
        }
        Ok((a, b))
    }

    /// CSV with columns `t,alpha_bar,snr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,alpha_bar,snr\n");
        for t in 1..=self.steps() {
            out.push_str(&format!("{t},{:.17e},{:.17e}\n", self.alpha_bar(t), self.snr(t)));
        }
        out
    }
}

/// Row-wise `ca[i]·a[i] + sb·cb[i]·b[i]` with `sb = ±1`; a single coefficient
/// applies to the whole tensor.
fn combine<T: Float>(a: &Tensor<T>, ca: &[T], b: &Tensor<T>, cb: &[T], subtract: bool) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape { op: "schedule combine", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }.into());
    }
    let rows = ca.len();
    if rows == 0 || a.numel() % rows != 0 || (rows > 1 && a.shape().first() != Some(&rows)) {
        return Err(LabError::contract("one timestep per batch row is required"));
    }
    let stride = a.numel() / rows;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(i, (&x, &y))| {
            let r = i / stride;
            if subtract {
                x * ca[r] - y * cb[r]
            } else {
                x * ca[r] + y * cb[r]
            }
        })
        .collect();
    Ok(Tensor::new(a.shape().to_vec(), data)?)
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε` with one timestep per leading row.
pub fn forward_diffuse_rows<T: Float>(x0: &Tensor<T>, eps: &Tensor<T>, ts: &[usize], s: &NoiseSchedule) -> Result<Tensor<T>> {
    let (a, b) = s.coefficients::<T>(ts)?;
    combine(x0, &a, eps, &b, false)
}

/// `v = √ᾱ_t·ε − √(1−ᾱ_t)·x0` with one timestep per leading row.
pub fn v_target_rows<T: Float>(x0: &Tensor<T>, eps: &Tensor<T>, ts: &[usize], s: &NoiseSchedule) -> Result<Tensor<T>> {
    let (a, b) = s.coefficients::<T>(ts)?;
    combine(eps, &a, x0, &b, true)
}

/// `x̂0 = √ᾱ_t·x_t − √(1−ᾱ_t)·v` with one timestep per leading row.
pub fn v_to_x0_rows<T: Float>(v: &Tensor<T>, x_t: &Tensor<T>, ts: &[usize], s: &NoiseSchedule) -> Result<Tensor<T>> {
    let (a, b) = s.coefficients::<T>(ts)?;
    combine(x_t, &a, v, &b, true)
}

/// `ε̂ = √ᾱ_t·v + √(1−ᾱ_t)·x_t` with one timestep per leading row.
pub fn v_to_eps_rows<T: Float>(v: &Tensor<T>, x_t: &Tensor<T>, ts: &[usize], s: &NoiseSchedule) -> Result<Tensor<T>> {
    let (a, b) = s.coefficients::<T>(ts)?;
    combine(v, &a, x_t, &b, false)
}

/// Forward diffusion of a whole tensor at a single timestep.
pub fn forward_diffuse<T: Float>(x0: &Tensor<T>, eps: &Tensor<T>, t: usize, s: &NoiseSchedule) -> Result<Tensor<T>> {
    forward_diffuse_rows(x0, eps, &[t], s)
}

pub fn v_target<T: Float>(x0: &Tensor<T>, eps: &Tensor<T>, t: usize, s: &NoiseSchedule) -> Result<Tensor<T>> {
    v_target_rows(x0, eps, &[t], s)
}

pub fn v_to_x0<T: Float>(v: &Tensor<T>, x_t: &Tensor<T>, t: usize, s: &NoiseSchedule) -> Result<Tensor<T>> {
    v_to_x0_rows(v, x_t, &[t], s)
}

pub fn v_to_eps<T: Float>(v: &Tensor<T>, x_t: &Tensor<T>, t: usize, s: &NoiseSchedule) -> Result<Tensor<T>> {
    v_to_eps_rows(v, x_t, &[t], s)
}

fn tape_combine<T: Float>(tape: &mut Tape<T>, a: Var, ca: &[T], b: Var, cb: &[T], subtract: bool) -> Result<Var> {
    let sa = tape.scale_rows(a, ca)?;
    let sb = tape.scale_rows(b, cb)?;
    Ok(if subtract { tape.sub(sa, sb)? } else { tape.add(sa, sb)? })
}

/// Tape counterpart of [`forward_diffuse_rows`].
pub fn forward_diffuse_on_tape<T: Float>(tape: &mut Tape<T>, x0: Var, eps: Var, ts: &[usize], s: &NoiseSchedule) -> Result<Var> {
    let (a, b) = s.coefficients::<T>(ts)?;
    tape_combine(tape, x0, &a, eps, &b, false)
}

/// Tape counterpart of [`v_to_x0_rows`].
pub fn v_to_x0_on_tape<T: Float>(tape: &mut Tape<T>, v: Var, x_t: Var, ts: &[usize], s: &NoiseSchedule) -> Result<Var> {
    let (a, b) = s.coefficients::<T>(ts)?;
    tape_combine(tape, x_t, &a, v, &b, true)
}

/// Tape counterpart of [`v_to_eps_rows`].
pub fn v_to_eps_on_tape<T: Float>(tape: &mut Tape<T>, v: Var, x_t: Var, ts: &[usize], s: &NoiseSchedule) -> Result<Var> {
    let (a, b) = s.coefficients::<T>(ts)?;
    tape_combine(tape, v, &a, x_t, &b, false)
}
