//! Deterministic DDIM sampling with classifier-free guidance.

use difflab_autodiff::{Float, Tensor};
use rand::Rng;

use crate::error::{LabError, Result};
use crate::models::{predict, Conditioning, Denoiser};
use crate::schedule::{forward_diffuse_rows, v_to_eps_rows, v_to_x0_rows, NoiseSchedule};

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Guidance weight `w`; 1 is the plain conditional model.
    pub cfg_scale: f64,
    pub rescale_phi: f64,
    pub record_trajectory: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 25, cfg_scale: 1.0, rescale_phi: 0.0, record_trajectory: false }
    }
}

impl SamplerConfig {
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if self.steps == 0 || self.steps > total_steps {
            return Err(LabError::config(format!("sampler steps {} outside [1, {total_steps}]", self.steps)));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(LabError::config(format!("cfg_scale {} must be finite and non-negative", self.cfg_scale)));
        }
        if !(0.0..=1.0).contains(&self.rescale_phi) {
            return Err(LabError::config(format!("rescale_phi {} outside [0, 1]", self.rescale_phi)));
        }
        Ok(())
    }
}

/// State of one sampling step, before the transition.
#[derive(Clone, Debug)]
pub struct StepRecord<T: Float = f32> {
    pub t: usize,
    pub x_t: Tensor<T>,
    pub v: Tensor<T>,
    pub x0_hat: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct SampleTrajectory<T: Float = f32> {
    pub records: Vec<StepRecord<T>>,
    pub sample: Tensor<T>,
    /// Model evaluations per sample.
    pub nfe: usize,
}

/// Evenly spaced, strictly decreasing timesteps starting at `T`:
/// `round(T − i·T/steps)` for `i = 0..steps`. The last step hands over to
/// `t = 0`, so every transition spans the same `T/steps` gap.
pub fn make_timestep_grid(steps: usize, total: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(LabError::config(format!("cannot take {steps} steps over {total} timesteps")));
    }
    let stride = total as f64 / steps as f64;
    Ok((0..steps).map(|i| (total as f64 - i as f64 * stride).round() as usize).collect())
}

/// DDIM transition from `t` to `t_next` without ordering checks; `t_next = 0`
/// returns x̂0.
pub fn ddim_transition<T: Float>(x_t: &Tensor<T>, v: &Tensor<T>, t: usize, t_next: usize, s: &NoiseSchedule) -> Result<Tensor<T>> {
    let rows = x_t.shape().first().copied().unwrap_or(1).max(1);
    let ts = vec![t; rows];
    let x0 = v_to_x0_rows(v, x_t, &ts, s)?;
    if t_next == 0 {
        return Ok(x0);
    }
    let eps = v_to_eps_rows(v, x_t, &ts, s)?;
    forward_diffuse_rows(&x0, &eps, &vec![t_next; rows], s)
}

/// One deterministic DDIM step: re-noise the predicted `(x̂0, ε̂)` at `t_next`.
pub fn ddim_step<T: Float>(x_t: &Tensor<T>, v: &Tensor<T>, t: usize, t_next: usize, s: &NoiseSchedule) -> Result<Tensor<T>> {
    if t <= t_next {
        return Err(LabError::contract(format!("DDIM step must move backwards in time ({t} -> {t_next})")));
    }
    ddim_transition(x_t, v, t, t_next, s)
}

/// `(1−w)·v_uncond + w·v_cond`, i.e. `v_uncond + w·(v_cond − v_uncond)`
/// written so that `w = 0` and `w = 1` are exact.
pub fn cfg_combine<T: Float>(v_cond: &Tensor<T>, v_uncond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    if v_cond.shape() != v_uncond.shape() {
        return Err(LabError::contract("conditional and unconditional predictions differ in shape"));
    }
    let wc = T::of(w);
    let wu = T::of(1.0 - w);
    let data = v_cond.data().iter().zip(v_uncond.data()).map(|(&c, &u)| wu * u + wc * c).collect();
    Ok(Tensor::new(v_cond.shape().to_vec(), data)?)
}

fn row_std<T: Float>(row: &[T]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    (row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Guidance rescale: per sample, scales `v_guided` to the standard deviation
/// of `v_cond` (population std over all non-batch elements) and blends
/// `phi·rescaled + (1−phi)·v_guided`. Samples with zero guided std pass
/// through unchanged.
pub fn cfg_rescale<T: Float>(v_guided: &Tensor<T>, v_cond: &Tensor<T>, phi: f64) -> Result<Tensor<T>> {
    if v_guided.shape() != v_cond.shape() {
        return Err(LabError::contract("guided and conditional predictions differ in shape"));
    }
    if !(0.0..=1.0).contains(&phi) {
        return Err(LabError::config(format!("rescale_phi {phi} outside [0, 1]")));
    }
    let mut out = v_guided.clone();
    if phi == 0.0 || out.numel() == 0 {
        return Ok(out);
    }
    let rows = v_guided.shape().first().copied().unwrap_or(1).max(1);
    let stride = out.numel() / rows;
    for (r, chunk) in out.data_mut().chunks_mut(stride).enumerate() {
        let std_g = row_std(chunk);
        if std_g == 0.0 {
            continue;
        }
        let std_c = row_std(&v_cond.data()[r * stride..(r + 1) * stride]);
        let factor = phi * std_c / std_g + (1.0 - phi);
        for v in chunk.iter_mut() {
            *v = T::of(v.as_f64() * factor);
        }
    }
    Ok(out)
}

/// Draws `x_T ∼ N(0, I)` for `c.len()` samples and integrates the DDIM grid.
///
/// Under guidance (`cfg_scale ≠ 1` and some non-null label) each step queries
/// the model twice; with `cfg_scale = 0` only the unconditional query is
/// needed. With all-null labels the unguided path is used throughout.
pub fn sample<T: Float, D: Denoiser<T> + ?Sized, R: Rng + ?Sized>(
    model: &D,
    c: &[Conditioning],
    cfg: &SamplerConfig,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<SampleTrajectory<T>> {
    let mut shape = vec![c.len()];
    shape.extend_from_slice(model.sample_shape());
    let x_t = Tensor::randn(shape, rng);
    sample_from(model, x_t, c, cfg, s)
}

/// [`sample`] starting from a given `x_T`.
pub fn sample_from<T: Float, D: Denoiser<T> + ?Sized>(
    model: &D,
    mut x_t: Tensor<T>,
    c: &[Conditioning],
    cfg: &SamplerConfig,
    s: &NoiseSchedule,
) -> Result<SampleTrajectory<T>> {
    cfg.validate(s.steps())?;
    let grid = make_timestep_grid(cfg.steps, s.steps())?;
    let guided = cfg.cfg_scale != 1.0 && c.iter().any(|ci| !ci.is_null());
    let null = vec![Conditioning::NULL; c.len()];
    let mut records = Vec::new();
    let mut nfe = 0;
    for (i, &t) in grid.iter().enumerate() {
        let ts = vec![t; c.len()];
        let v = if !guided {
            nfe += 1;
            predict(model, &x_t, &ts, c)?
        } else if cfg.cfg_scale == 0.0 {
            nfe += 1;
            predict(model, &x_t, &ts, &null)?
        } else {
            nfe += 2;
            let v_c = predict(model, &x_t, &ts, c)?;
            let v_u = predict(model, &x_t, &ts, &null)?;
            let v_g = cfg_combine(&v_c, &v_u, cfg.cfg_scale)?;
            cfg_rescale(&v_g, &v_c, cfg.rescale_phi)?
        };
        let t_next = grid.get(i + 1).copied().unwrap_or(0);
        if cfg.record_trajectory {
            let x0_hat = v_to_x0_rows(&v, &x_t, &ts, s)?;
            records.push(StepRecord { t, x_t: x_t.clone(), v: v.clone(), x0_hat });
        }
        x_t = ddim_step(&x_t, &v, t, t_next, s)?;
    }
    Ok(SampleTrajectory { records, sample: x_t, nfe })
}
