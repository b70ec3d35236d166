//! Denoising networks `f_θ(x_t, t, c) → v̂` with named hidden-feature taps.

pub(crate) mod checkpoint;
mod mlp;
mod unet;

use difflab_autodiff::{Float, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{LabError, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use mlp::{Mlp2d, MlpConfig};
pub use unet::{TinyUnet, UnetConfig};

/// Class label or the reserved null token used for unconditional queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Conditioning(Option<usize>);

impl Conditioning {
    pub const NULL: Conditioning = Conditioning(None);

    pub fn class(id: usize) -> Self {
        Self(Some(id))
    }

    pub fn class_id(self) -> Option<usize> {
        self.0
    }

    pub fn is_null(self) -> bool {
        self.0.is_none()
    }

    /// Row of the class-embedding table: the class id, or `num_classes` for null.
    pub fn embedding_row(self, num_classes: usize) -> Result<usize> {
        match self.0 {
            None => Ok(num_classes),
            Some(c) if c < num_classes => Ok(c),
            Some(c) => Err(LabError::contract(format!("class {c} outside vocabulary of {num_classes}"))),
        }
    }
}

/// Which hidden activations the perceptual loss compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureTap {
    EncoderAll,
    DecoderAll,
    EncoderPlusMid,
    MidOnly,
}

impl FeatureTap {
    pub const ALL: [FeatureTap; 4] =
        [FeatureTap::EncoderAll, FeatureTap::DecoderAll, FeatureTap::EncoderPlusMid, FeatureTap::MidOnly];

    pub fn name(self) -> &'static str {
        match self {
            FeatureTap::EncoderAll => "encoder_all",
            FeatureTap::DecoderAll => "decoder_all",
            FeatureTap::EncoderPlusMid => "encoder_plus_mid",
            FeatureTap::MidOnly => "mid_only",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FeatureTap::EncoderAll => "All Encoder Layers",
            FeatureTap::DecoderAll => "All Decoder Layers",
            FeatureTap::EncoderPlusMid => "All Encoder Layers + Midblock Layer",
            FeatureTap::MidOnly => "Only Midblock Layer",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| LabError::config(format!("unknown feature tap `{s}`")))
    }

    pub(crate) fn needs_decoder(self) -> bool {
        matches!(self, FeatureTap::DecoderAll)
    }
}

/// What a traced forward pass must produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardRequest {
    pub tap: Option<FeatureTap>,
    /// When false, the pass may stop once the requested features exist.
    pub need_output: bool,
}

impl ForwardRequest {
    pub const OUTPUT: ForwardRequest = ForwardRequest { tap: None, need_output: true };

    pub fn features_only(tap: FeatureTap) -> Self {
        Self { tap: Some(tap), need_output: false }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOutput {
    pub v: Option<Var>,
    pub features: Vec<Var>,
}

/// A network (or analytic stand-in) predicting v from `(x_t, t, c)`.
pub trait Denoiser<T: Float = f32> {
    /// Shape of one sample, without the batch dimension.
    fn sample_shape(&self) -> &[usize];

    fn num_classes(&self) -> usize;

    /// Diffusion step count `T` the time embedding is normalized by.
    fn timesteps(&self) -> usize;

    fn params(&self) -> &ParamStore<T>;

    /// Records the forward pass of a batch on `tape`. `params` are the
    /// variables returned by binding [`Denoiser::params`] on the same tape.
    fn trace(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x: Var,
        t: &[usize],
        c: &[Conditioning],
        request: ForwardRequest,
    ) -> Result<ForwardOutput>;
}

/// Shape and label checks shared by every denoiser.
pub(crate) fn validate_batch<T: Float, D: Denoiser<T> + ?Sized>(
    model: &D,
    x_shape: &[usize],
    t: &[usize],
    c: &[Conditioning],
) -> Result<usize> {
    let batch = *x_shape.first().ok_or_else(|| LabError::contract("denoiser input needs a batch dimension"))?;
    if &x_shape[1..] != model.sample_shape() {
        return Err(LabError::contract(format!(
            "input sample shape {:?} does not match model shape {:?}",
            &x_shape[1..],
            model.sample_shape()
        )));
    }
    if t.len() != batch || c.len() != batch {
        return Err(LabError::contract(format!(
            "batch of {batch} needs as many timesteps and labels (got {} and {})",
            t.len(),
            c.len()
        )));
    }
    if let Some(bad) = t.iter().find(|&&t| t == 0 || t > model.timesteps()) {
        return Err(LabError::contract(format!("timestep {bad} outside [1, {}]", model.timesteps())));
    }
    for ci in c {
        ci.embedding_row(model.num_classes())?;
    }
    Ok(batch)
}

/// Evaluates `model` on a batch and returns v̂.
pub fn predict<T: Float, D: Denoiser<T> + ?Sized>(model: &D, x: &Tensor<T>, t: &[usize], c: &[Conditioning]) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let params = model.params().bind(&mut tape);
    let xv = tape.constant(x.clone());
    let out = model.trace(&mut tape, &params, xv, t, c, ForwardRequest::OUTPUT)?;
    let v = out.v.ok_or_else(|| LabError::contract("denoiser produced no output"))?;
    Ok(tape.tensor(v))
}

/// Evaluates `model` and returns v̂ together with the tapped features.
pub fn predict_with_features<T: Float, D: Denoiser<T> + ?Sized>(
    model: &D,
    x: &Tensor<T>,
    t: &[usize],
    c: &[Conditioning],
    tap: FeatureTap,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let params = model.params().bind(&mut tape);
    let xv = tape.constant(x.clone());
    let out = model.trace(&mut tape, &params, xv, t, c, ForwardRequest { tap: Some(tap), need_output: true })?;
    let v = out.v.ok_or_else(|| LabError::contract("denoiser produced no output"))?;
    Ok((tape.tensor(v), out.features.iter().map(|f| tape.tensor(*f)).collect()))
}

/// Sinusoidal embedding of `t/T`: `dim/2` sines followed by `dim/2` cosines
/// with geometric frequencies, phases scaled so `t/T = 1` spans 1000 radians
/// at the lowest frequency.
pub fn time_embedding<T: Float>(t: usize, dim: usize, total_steps: usize) -> Result<Tensor<T>> {
    Ok(time_embedding_batch(&[t], dim, total_steps)?.reshape([dim])?)
}

/// [`time_embedding`] for a batch of timesteps, shaped `[len × dim]`.
pub fn time_embedding_batch<T: Float>(ts: &[usize], dim: usize, total_steps: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(LabError::config(format!("time embedding dimension must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let phase = 1000.0 * t as f64 / total_steps.max(1) as f64;
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| phase * f).collect();
        data.extend(args.iter().map(|a| T::of(a.sin())));
        data.extend(args.iter().map(|a| T::of(a.cos())));
    }
    Ok(Tensor::new([ts.len(), dim], data)?)
}

/// Architecture choice plus hyperparameters; enough to rebuild a model.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelConfig {
    Mlp2d(MlpConfig),
    TinyUnet(UnetConfig),
}

impl ModelConfig {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelConfig::Mlp2d(_) => "mlp2d",
            ModelConfig::TinyUnet(_) => "tiny_unet",
        }
    }

    pub fn build<T: Float, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DenoiserModel<T>> {
        Ok(match self {
            ModelConfig::Mlp2d(c) => DenoiserModel::Mlp(Mlp2d::new(c.clone(), rng)?),
            ModelConfig::TinyUnet(c) => DenoiserModel::Unet(TinyUnet::new(c.clone(), rng)?),
        })
    }
}

/// A trainable denoiser of either architecture.
#[derive(Clone, Debug)]
pub enum DenoiserModel<T: Float = f32> {
    Mlp(Mlp2d<T>),
    Unet(TinyUnet<T>),
}

impl<T: Float> DenoiserModel<T> {
    pub fn config(&self) -> ModelConfig {
        match self {
            DenoiserModel::Mlp(m) => ModelConfig::Mlp2d(m.config().clone()),
            DenoiserModel::Unet(m) => ModelConfig::TinyUnet(m.config().clone()),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            DenoiserModel::Mlp(m) => m.params_mut(),
            DenoiserModel::Unet(m) => m.params_mut(),
        }
    }

    /// Replaces all parameter values; names and shapes must match.
    pub fn load_params(&mut self, src: &ParamStore<T>) -> Result<()> {
        let dst = self.params_mut();
        if dst.names() != src.names() {
            return Err(LabError::contract("parameter layout mismatch"));
        }
        for i in 0..src.len() {
            dst.set_data(i, src.tensor(i).clone())?;
        }
        Ok(())
    }

    /// Deep copy with every parameter frozen. Gradients still flow through
    /// the copy to its inputs.
    pub fn freeze_copy(&self) -> Result<DenoiserModel<T>> {
        if !self.params().all_finite() {
            return Err(LabError::contract("cannot freeze a model with non-finite parameters"));
        }
        let mut copy = self.clone();
        copy.params_mut().set_requires_grad(false);
        Ok(copy)
    }

    pub fn is_frozen(&self) -> bool {
        !self.params().any_requires_grad()
    }

    /// Same architecture and values in another element type.
    pub fn cast<U: Float>(&self) -> DenoiserModel<U> {
        match self {
            DenoiserModel::Mlp(m) => DenoiserModel::Mlp(m.cast()),
            DenoiserModel::Unet(m) => DenoiserModel::Unet(m.cast()),
        }
    }
}

impl<T: Float> Denoiser<T> for DenoiserModel<T> {
    fn sample_shape(&self) -> &[usize] {
        match self {
            DenoiserModel::Mlp(m) => m.sample_shape(),
            DenoiserModel::Unet(m) => m.sample_shape(),
        }
    }

    fn num_classes(&self) -> usize {
        match self {
            DenoiserModel::Mlp(m) => m.num_classes(),
            DenoiserModel::Unet(m) => m.num_classes(),
        }
    }

    fn timesteps(&self) -> usize {
        match self {
            DenoiserModel::Mlp(m) => m.timesteps(),
            DenoiserModel::Unet(m) => m.timesteps(),
        }
    }

    fn params(&self) -> &ParamStore<T> {
        match self {
            DenoiserModel::Mlp(m) => m.params(),
            DenoiserModel::Unet(m) => m.params(),
        }
    }

    fn trace(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x: Var,
        t: &[usize],
        c: &[Conditioning],
        request: ForwardRequest,
    ) -> Result<ForwardOutput> {
        match self {
            DenoiserModel::Mlp(m) => m.trace(tape, params, x, t, c, request),
            DenoiserModel::Unet(m) => m.trace(tape, params, x, t, c, request),
        }
    }
}
