//! Analytic ground truths: the posterior-optimal ("MLE flow") v-prediction of
//! a finite dataset, its Gaussian-mixture counterpart, and the MSE midpoint.

use difflab_autodiff::{Float, ParamStore, Tape, Tensor, Var};

use crate::error::{LabError, Result};
use crate::models::{validate_batch, Conditioning, Denoiser, ForwardOutput, ForwardRequest};
use crate::schedule::NoiseSchedule;

/// An empirical distribution: equally weighted points, each with an optional
/// class label.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDataset {
    sample_shape: Vec<usize>,
    data: Vec<f32>,
    labels: Vec<Option<usize>>,
    num_classes: usize,
}

impl FiniteDataset {
    /// `data` holds the points back to back; `labels` has one entry per point.
    pub fn new(sample_shape: Vec<usize>, data: Vec<f32>, labels: Vec<Option<usize>>, num_classes: usize) -> Result<Self> {
        let dim: usize = sample_shape.iter().product();
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(LabError::config(format!("{} values do not form points of shape {sample_shape:?}", data.len())));
        }
        if labels.len() != data.len() / dim {
            return Err(LabError::config(format!("{} labels for {} points", labels.len(), data.len() / dim)));
        }
        if labels.iter().flatten().any(|&l| l >= num_classes) {
            return Err(LabError::config(format!("label outside 0..{num_classes}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LabError::config("dataset contains non-finite values"));
        }
        Ok(Self { sample_shape, data, labels, num_classes })
    }

    /// Unlabelled dataset from a list of equally shaped points.
    pub fn from_points(points: &[Tensor<f32>]) -> Result<Self> {
        let first = points.first().ok_or_else(|| LabError::config("dataset needs at least one point"))?;
        let shape = first.shape().to_vec();
        let mut data = Vec::new();
        for p in points {
            if p.shape() != shape.as_slice() {
                return Err(LabError::config("dataset points differ in shape"));
            }
            data.extend_from_slice(p.data());
        }
        Self::new(shape, data, vec![None; points.len()], 0)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn dim(&self) -> usize {
        self.data.len() / self.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn point(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn label(&self, i: usize) -> Conditioning {
        self.labels[i].map_or(Conditioning::NULL, Conditioning::class)
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    /// Points `indices` stacked into a batch with their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<Conditioning>)> {
        let mut data = Vec::with_capacity(indices.len() * self.dim());
        for &i in indices {
            if i >= self.len() {
                return Err(LabError::contract(format!("index {i} outside dataset of {}", self.len())));
            }
            data.extend_from_slice(self.point(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Ok((Tensor::new(shape, data)?, indices.iter().map(|&i| self.label(i)).collect()))
    }

    /// Every point as one batch.
    pub fn as_batch(&self) -> Result<(Tensor<f32>, Vec<Conditioning>)> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Points carrying `class` (or all points for the null label).
    pub fn subset(&self, c: Conditioning) -> Result<FiniteDataset> {
        let Some(k) = c.class_id() else { return Ok(self.clone()) };
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == Some(k)).collect();
        if idx.is_empty() {
            return Err(LabError::contract(format!("no points with class {k}")));
        }
        let mut data = Vec::with_capacity(idx.len() * self.dim());
        for &i in &idx {
            data.extend_from_slice(self.point(i));
        }
        Self::new(self.sample_shape.clone(), data, vec![Some(k); idx.len()], self.num_classes)
    }

    /// Splits off the first `n` points (after the caller's own shuffling).
    pub fn split_at(&self, n: usize) -> Result<(FiniteDataset, FiniteDataset)> {
        if n == 0 || n >= self.len() {
            return Err(LabError::config(format!("cannot split {} points at {n}", self.len())));
        }
        let d = self.dim();
        let head = Self::new(self.sample_shape.clone(), self.data[..n * d].to_vec(), self.labels[..n].to_vec(), self.num_classes)?;
        let tail = Self::new(self.sample_shape.clone(), self.data[n * d..].to_vec(), self.labels[n..].to_vec(), self.num_classes)?;
        Ok((head, tail))
    }
}

fn rows_of<T: Float>(x: &Tensor<T>, dim: usize) -> Result<usize> {
    if dim == 0 || x.numel() % dim != 0 {
        return Err(LabError::contract(format!("input of shape {:?} does not hold points of size {dim}", x.shape())));
    }
    Ok(x.numel() / dim)
}

fn log_sum_exp_weights(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    for l in logits.iter_mut() {
        *l /= total;
    }
}

/// `v` from `E[x0 | x_t]` at schedule coefficients `(a, b)`.
fn v_from_posterior_mean<'a>(x: &'a [f64], mean: &'a [f64], a: f64, b: f64) -> impl Iterator<Item = f64> + 'a {
    // ε̂ = (x − a·m)/b, v = a·ε̂ − b·m = (a·x − m)/b.
    x.iter().zip(mean).map(move |(&xi, &mi)| (a * xi - mi) / b)
}

fn check_noisy(t: usize, s: &NoiseSchedule) -> Result<(f64, f64)> {
    s.check(t)?;
    let (a, b) = (s.sqrt_alpha_bar(t), s.sqrt_one_minus_alpha_bar(t));
    if b == 0.0 {
        return Err(LabError::contract(format!("posterior at t={t} is undefined: no noise (alpha_bar = 1)")));
    }
    Ok((a, b))
}

/// Posterior mean `E[x0 | x_t]` under the empirical distribution of `data`,
/// one row per batch element of `x_t`.
pub fn posterior_mean(x_t: &Tensor<f64>, t: usize, data: &FiniteDataset, s: &NoiseSchedule) -> Result<Tensor<f64>> {
    let (a, b) = check_noisy(t, s)?;
    let d = data.dim();
    let rows = rows_of(x_t, d)?;
    let mut out = Vec::with_capacity(x_t.numel());
    let mut logits = vec![0.0; data.len()];
    for r in 0..rows {
        let x = &x_t.data()[r * d..(r + 1) * d];
        for (i, l) in logits.iter_mut().enumerate() {
            let dist: f64 = x.iter().zip(data.point(i)).map(|(&xi, &pi)| (xi - a * pi as f64).powi(2)).sum();
            *l = -dist / (2.0 * b * b);
        }
        log_sum_exp_weights(&mut logits);
        let mut mean = vec![0.0; d];
        for (i, w) in logits.iter().enumerate() {
            for (m, &p) in mean.iter_mut().zip(data.point(i)) {
                *m += w * p as f64;
            }
        }
        out.extend(mean);
    }
    Ok(Tensor::new(x_t.shape().to_vec(), out)?)
}

/// The MSE-optimal v-prediction for the empirical distribution of `data`
/// (the regression target an unlimited-capacity model converges to).
/// Computed in double precision with log-sum-exp weights.
pub fn posterior_optimal_v(x_t: &Tensor<f64>, t: usize, data: &FiniteDataset, s: &NoiseSchedule) -> Result<Tensor<f64>> {
    let (a, b) = check_noisy(t, s)?;
    let mean = posterior_mean(x_t, t, data, s)?;
    let v = v_from_posterior_mean(x_t.data(), mean.data(), a, b).collect();
    Ok(Tensor::new(x_t.shape().to_vec(), v)?)
}

/// Isotropic Gaussian mixture `Σ_k w_k N(μ_k, σ_k² I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub sigmas: Vec<f64>,
}

impl GaussianMixture {
    pub fn validate(&self) -> Result<usize> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.sigmas.len() != k {
            return Err(LabError::config("mixture needs matching, non-empty weights, means and sigmas"));
        }
        if (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 || self.weights.iter().any(|&w| w < 0.0) {
            return Err(LabError::config("mixture weights must be non-negative and sum to 1"));
        }
        if self.sigmas.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(LabError::config("mixture sigmas must be finite and non-negative"));
        }
        let d = self.means[0].len();
        if d == 0 || self.means.iter().any(|m| m.len() != d) {
            return Err(LabError::config("mixture means differ in dimension"));
        }
        Ok(d)
    }
}

/// `E[x0 | x_t]` for a Gaussian-mixture data distribution.
pub fn gaussian_mixture_posterior_mean(x_t: &Tensor<f64>, t: usize, mix: &GaussianMixture, s: &NoiseSchedule) -> Result<Tensor<f64>> {
    let (a, b) = check_noisy(t, s)?;
    let d = mix.validate()?;
    let rows = rows_of(x_t, d)?;
    let var: Vec<f64> = mix.sigmas.iter().map(|sg| a * a * sg * sg + b * b).collect();
    let mut out = Vec::with_capacity(x_t.numel());
    let mut logits = vec![0.0; mix.weights.len()];
    for r in 0..rows {
        let x = &x_t.data()[r * d..(r + 1) * d];
        for (k, l) in logits.iter_mut().enumerate() {
            let dist: f64 = x.iter().zip(&mix.means[k]).map(|(&xi, &mi)| (xi - a * mi).powi(2)).sum();
            *l = mix.weights[k].ln() - 0.5 * d as f64 * var[k].ln() - dist / (2.0 * var[k]);
        }
        log_sum_exp_weights(&mut logits);
        let mut mean = vec![0.0; d];
        for (k, w) in logits.iter().enumerate() {
            let gain = a * mix.sigmas[k] * mix.sigmas[k] / var[k];
            for ((m, &xi), &mu) in mean.iter_mut().zip(x).zip(&mix.means[k]) {
                *m += w * (mu + gain * (xi - a * mu));
            }
        }
        out.extend(mean);
    }
    Ok(Tensor::new(x_t.shape().to_vec(), out)?)
}

/// The MSE-optimal v-prediction for a Gaussian-mixture data distribution.
pub fn gaussian_mixture_v(x_t: &Tensor<f64>, t: usize, mix: &GaussianMixture, s: &NoiseSchedule) -> Result<Tensor<f64>> {
    let (a, b) = check_noisy(t, s)?;
    let mean = gaussian_mixture_posterior_mean(x_t, t, mix, s)?;
    let v = v_from_posterior_mean(x_t.data(), mean.data(), a, b).collect();
    Ok(Tensor::new(x_t.shape().to_vec(), v)?)
}

/// The minimizer of `Σ‖m − x_i‖²`: the arithmetic mean.
pub fn mse_midpoint<T: Float>(samples: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = samples.first().ok_or_else(|| LabError::contract("midpoint of an empty set"))?;
    let mut acc = vec![0.0f64; first.numel()];
    for x in samples {
        if x.shape() != first.shape() {
            return Err(LabError::contract("midpoint samples differ in shape"));
        }
        for (a, v) in acc.iter_mut().zip(x.data()) {
            *a += v.as_f64();
        }
    }
    let n = samples.len() as f64;
    Ok(Tensor::new(first.shape().to_vec(), acc.into_iter().map(|a| T::of(a / n)).collect())?)
}

/// Wraps [`posterior_optimal_v`] as a parameter-free [`Denoiser`], so the
/// exact MLE flow can be sampled like a trained model. Conditional queries
/// use the subset of points with the requested class.
#[derive(Clone, Debug)]
pub struct PosteriorOracle<T: Float = f32> {
    data: FiniteDataset,
    schedule: NoiseSchedule,
    params: ParamStore<T>,
}

impl<T: Float> PosteriorOracle<T> {
    pub fn new(data: FiniteDataset, schedule: NoiseSchedule) -> Self {
        Self { data, schedule, params: ParamStore::new() }
    }
}

impl<T: Float> Denoiser<T> for PosteriorOracle<T> {
    fn sample_shape(&self) -> &[usize] {
        self.data.sample_shape()
    }

    fn num_classes(&self) -> usize {
        self.data.num_classes()
    }

    fn timesteps(&self) -> usize {
        self.schedule.steps()
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn trace(
        &self,
        tape: &mut Tape<T>,
        _params: &[Var],
        x: Var,
        t: &[usize],
        c: &[Conditioning],
        request: ForwardRequest,
    ) -> Result<ForwardOutput> {
        validate_batch(self, tape.shape(x), t, c)?;
        if request.tap.is_some() {
            return Err(LabError::contract("the posterior oracle has no hidden features"));
        }
        let xs: Tensor<f64> = tape.tensor(x).cast();
        let d = self.data.dim();
        let mut out = Vec::with_capacity(xs.numel());
        for (r, (&ti, &ci)) in t.iter().zip(c).enumerate() {
            let row = Tensor::new([1, d], xs.data()[r * d..(r + 1) * d].to_vec())?;
            let subset = self.data.subset(ci)?;
            out.extend(posterior_optimal_v(&row, ti, &subset, &self.schedule)?.data().iter().map(|&v| T::of(v)));
        }
        let v = tape.constant(Tensor::new(xs.shape().to_vec(), out)?);
        Ok(ForwardOutput { v: request.need_output.then_some(v), features: vec![] })
    }
}
