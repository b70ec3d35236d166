//! Training objectives: plain v-prediction MSE and the self-perceptual loss.
//!
//! Every loss has two entry points. `*_loss` draws its own timesteps and
//! noise from an rng and accumulates gradients into the model. `evaluate_*`
//! takes explicit draws and returns the gradients without applying them,
//! which is what tests and multi-worker evaluation use.

use std::collections::BTreeMap;

use difflab_autodiff::{Float, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{LabError, Result};
use crate::models::{Conditioning, Denoiser, DenoiserModel, FeatureTap, ForwardRequest};
use crate::schedule::{forward_diffuse_on_tape, v_target_rows, v_to_eps_on_tape, v_to_x0_on_tape, NoiseSchedule};

/// How the perceptual timestep t′ is chosen from t.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TPrimeSampler {
    /// t ± k with equal probability.
    DeltaStep(usize),
    /// round(N(t, σ²)).
    GaussianAroundT(f64),
    /// Uniform over `1..=T` excluding t.
    UniformInt,
}

impl TPrimeSampler {
    pub fn name(&self) -> String {
        match self {
            TPrimeSampler::DeltaStep(k) => format!("delta{k}"),
            TPrimeSampler::GaussianAroundT(s) => format!("gauss{s}"),
            TPrimeSampler::UniformInt => "uniform".into(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            TPrimeSampler::DeltaStep(k) => format!("t'=t±{k}"),
            TPrimeSampler::GaussianAroundT(s) => format!("t'~N(t,{s})"),
            TPrimeSampler::UniformInt => "t'~U(1,T)".into(),
        }
    }

    /// Parses `uniform`, `deltaK` or `gaussS`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || LabError::config(format!("unknown t' sampler `{s}`"));
        if s == "uniform" {
            Ok(TPrimeSampler::UniformInt)
        } else if let Some(k) = s.strip_prefix("delta") {
            Ok(TPrimeSampler::DeltaStep(k.parse().map_err(|_| bad())?))
        } else if let Some(sig) = s.strip_prefix("gauss") {
            let sigma: f64 = sig.parse().map_err(|_| bad())?;
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(bad());
            }
            Ok(TPrimeSampler::GaussianAroundT(sigma))
        } else {
            Err(bad())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureDistance {
    Mse,
    Mae,
}

impl FeatureDistance {
    pub fn name(self) -> &'static str {
        match self {
            FeatureDistance::Mse => "mse",
            FeatureDistance::Mae => "mae",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FeatureDistance::Mse => "Mean Squared Distance",
            FeatureDistance::Mae => "Mean Absolute Distance",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(FeatureDistance::Mse),
            "mae" => Ok(FeatureDistance::Mae),
            _ => Err(LabError::config(format!("unknown feature distance `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpConfig {
    pub tap: FeatureTap,
    pub tprime: TPrimeSampler,
    pub distance: FeatureDistance,
    pub cond_dropout_prob: f64,
}

impl Default for SpConfig {
    fn default() -> Self {
        Self {
            tap: FeatureTap::MidOnly,
            tprime: TPrimeSampler::UniformInt,
            distance: FeatureDistance::Mse,
            cond_dropout_prob: 0.1,
        }
    }
}

impl SpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cond_dropout_prob) {
            return Err(LabError::config(format!("cond_dropout_prob {} outside [0, 1]", self.cond_dropout_prob)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBatchResult {
    pub loss: f64,
    pub aux: BTreeMap<&'static str, f64>,
}

/// Loss value plus per-parameter gradients (store order; `None` where no
/// gradient reached the parameter).
#[derive(Clone, Debug)]
pub struct Evaluated<T> {
    pub result: LossBatchResult,
    pub grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Evaluated<T> {
    pub fn apply_to(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.grads.len() != store.len() {
            return Err(LabError::contract("gradient list does not match the parameter store"));
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                store.tensor_mut(i).accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

/// Random quantities of one MSE evaluation.
#[derive(Clone, Debug)]
pub struct MseDraws<T: Float> {
    pub t: Vec<usize>,
    pub eps: Tensor<T>,
}

/// Random quantities of one self-perceptual evaluation.
#[derive(Clone, Debug)]
pub struct SpDraws<T: Float> {
    pub t: Vec<usize>,
    pub eps: Tensor<T>,
    pub tprime: Vec<usize>,
}

/// t ∼ U{1..T}, one per batch element.
pub fn draw_timesteps<R: Rng + ?Sized>(batch: usize, steps: usize, rng: &mut R) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(1..=steps)).collect()
}

impl<T: Float> MseDraws<T> {
    pub fn sample<R: Rng + ?Sized>(shape: &[usize], s: &NoiseSchedule, rng: &mut R) -> Self {
        let t = draw_timesteps(shape[0], s.steps(), rng);
        let eps = Tensor::randn(shape.to_vec(), rng);
        Self { t, eps }
    }
}

impl<T: Float> SpDraws<T> {
    pub fn sample<R: Rng + ?Sized>(shape: &[usize], s: &NoiseSchedule, cfg: &SpConfig, rng: &mut R) -> Self {
        let MseDraws { t, eps } = MseDraws::sample(shape, s, rng);
        let tprime = t.iter().map(|&ti| sample_tprime(ti, s.steps(), &cfg.tprime, rng)).collect();
        Self { t, eps, tprime }
    }
}

/// Draws t′ for a given t. Results are clamped to `[1, T]` and never equal t:
/// a clamped collision is moved one step toward the interior.
pub fn sample_tprime<R: Rng + ?Sized>(t: usize, steps: usize, sampler: &TPrimeSampler, rng: &mut R) -> usize {
    let clamp = |v: i64| v.clamp(1, steps as i64) as usize;
    let candidate = match *sampler {
        TPrimeSampler::UniformInt => {
            let u = rng.random_range(1..steps);
            return if u >= t { u + 1 } else { u };
        }
        TPrimeSampler::DeltaStep(k) => {
            let k = k as i64;
            clamp(if rng.random::<bool>() { t as i64 + k } else { t as i64 - k })
        }
        TPrimeSampler::GaussianAroundT(sigma) => {
            let n = Normal::new(t as f64, sigma).expect("positive sigma");
            clamp(n.sample(rng).round() as i64)
        }
    };
    if candidate != t {
        candidate
    } else if t < steps {
        t + 1
    } else {
        t - 1
    }
}

/// Replaces `c` by the null token with probability `p`.
pub fn apply_cond_dropout<R: Rng + ?Sized>(c: Conditioning, p: f64, rng: &mut R) -> Conditioning {
    if rng.random::<f64>() < p {
        Conditioning::NULL
    } else {
        c
    }
}

fn mean_of(ts: &[usize]) -> f64 {
    ts.iter().sum::<usize>() as f64 / ts.len().max(1) as f64
}

fn finish<T: Float>(
    tape: &Tape<T>,
    loss: Var,
    params: &[Var],
    aux: BTreeMap<&'static str, f64>,
    what: &str,
) -> Result<Evaluated<T>> {
    let value = tape.item(loss).as_f64();
    if !value.is_finite() {
        let detail = aux.iter().map(|(k, v)| format!("{k}={v:.4}")).collect::<Vec<_>>().join(", ");
        return Err(LabError::Numerical { step: 0, detail: format!("non-finite {what} loss ({detail})") });
    }
    let g = tape.backward(loss)?;
    let grads = params.iter().map(|p| g.get(*p).map(<[T]>::to_vec)).collect();
    Ok(Evaluated { result: LossBatchResult { loss: value, aux }, grads })
}

/// `mean ‖v̂_t − v_t‖²` for explicit draws.
pub fn evaluate_mse<T: Float, D: Denoiser<T> + ?Sized>(
    model: &D,
    x0: &Tensor<T>,
    c: &[Conditioning],
    draws: &MseDraws<T>,
    s: &NoiseSchedule,
) -> Result<Evaluated<T>> {
    let target = v_target_rows(x0, &draws.eps, &draws.t, s)?;
    let mut tape = Tape::new();
    let params = model.params().bind(&mut tape);
    let x0v = tape.constant(x0.clone());
    let ev = tape.constant(draws.eps.clone());
    let xt = forward_diffuse_on_tape(&mut tape, x0v, ev, &draws.t, s)?;
    let out = model.trace(&mut tape, &params, xt, &draws.t, c, ForwardRequest::OUTPUT)?;
    let v = out.v.ok_or_else(|| LabError::contract("denoiser produced no output"))?;
    let tv = tape.constant(target);
    let loss = tape.mse_reduce(v, tv)?;
    let aux = BTreeMap::from([
        ("t_mean", mean_of(&draws.t)),
        ("alpha_bar_mean", draws.t.iter().map(|&t| s.alpha_bar(t)).sum::<f64>() / draws.t.len().max(1) as f64),
    ]);
    finish(&tape, loss, &params, aux, "mse")
}

/// Self-perceptual loss for explicit draws.
///
/// Predicts v̂ at t, converts it to (x̂0, ε̂), re-noises both the prediction
/// and the ground truth to t′, and compares the frozen network's features of
/// the two. Gradients reach only `online`.
pub fn evaluate_sp<T: Float, D: Denoiser<T> + ?Sized, P: Denoiser<T> + ?Sized>(
    online: &D,
    frozen: &P,
    x0: &Tensor<T>,
    c: &[Conditioning],
    draws: &SpDraws<T>,
    s: &NoiseSchedule,
    cfg: &SpConfig,
) -> Result<Evaluated<T>> {
    if frozen.params().any_requires_grad() {
        return Err(LabError::contract("perceptual network must be frozen"));
    }
    let mut tape = Tape::new();
    let params = online.params().bind(&mut tape);
    let frozen_params = frozen.params().bind(&mut tape);
    let x0v = tape.constant(x0.clone());
    let ev = tape.constant(draws.eps.clone());
    let xt = forward_diffuse_on_tape(&mut tape, x0v, ev, &draws.t, s)?;
    let out = online.trace(&mut tape, &params, xt, &draws.t, c, ForwardRequest::OUTPUT)?;
    let v = out.v.ok_or_else(|| LabError::contract("denoiser produced no output"))?;
    let x0_hat = v_to_x0_on_tape(&mut tape, v, xt, &draws.t, s)?;
    let eps_hat = v_to_eps_on_tape(&mut tape, v, xt, &draws.t, s)?;
    let x_tp = forward_diffuse_on_tape(&mut tape, x0v, ev, &draws.tprime, s)?;
    let x_tp_hat = forward_diffuse_on_tape(&mut tape, x0_hat, eps_hat, &draws.tprime, s)?;

    let request = ForwardRequest::features_only(cfg.tap);
    let real = frozen.trace(&mut tape, &frozen_params, x_tp, &draws.tprime, c, request)?.features;
    let pred = frozen.trace(&mut tape, &frozen_params, x_tp_hat, &draws.tprime, c, request)?.features;
    if real.is_empty() || real.len() != pred.len() {
        return Err(LabError::contract("perceptual network returned no features for the tap"));
    }
    let mut total: Option<Var> = None;
    for (p, r) in pred.iter().zip(&real) {
        let d = match cfg.distance {
            FeatureDistance::Mse => tape.mse_reduce(*p, *r)?,
            FeatureDistance::Mae => tape.mae_reduce(*p, *r)?,
        };
        total = Some(match total {
            None => d,
            Some(acc) => tape.add(acc, d)?,
        });
    }
    let total = total.expect("at least one tap");
    let loss = if pred.len() == 1 { total } else { tape.scale(total, T::of(1.0 / pred.len() as f64)) };
    let aux = BTreeMap::from([
        ("t_mean", mean_of(&draws.t)),
        ("tprime_mean", mean_of(&draws.tprime)),
        ("taps", pred.len() as f64),
    ]);
    finish(&tape, loss, &params, aux, "sp")
}

/// MSE objective with internally drawn t and ε; gradients accumulate into `model`.
pub fn mse_loss<T: Float, R: Rng + ?Sized>(
    model: &mut DenoiserModel<T>,
    x0: &Tensor<T>,
    c: &[Conditioning],
    rng: &mut R,
    s: &NoiseSchedule,
) -> Result<LossBatchResult> {
    let draws = MseDraws::sample(x0.shape(), s, rng);
    let ev = evaluate_mse(model, x0, c, &draws, s)?;
    ev.apply_to(model.params_mut())?;
    Ok(ev.result)
}

/// Self-perceptual objective with internally drawn t, ε, t′; gradients
/// accumulate into `online` only.
pub fn sp_loss<T: Float, R: Rng + ?Sized>(
    online: &mut DenoiserModel<T>,
    frozen: &DenoiserModel<T>,
    x0: &Tensor<T>,
    c: &[Conditioning],
    rng: &mut R,
    s: &NoiseSchedule,
    cfg: &SpConfig,
) -> Result<LossBatchResult> {
    let draws = SpDraws::sample(x0.shape(), s, cfg, rng);
    let ev = evaluate_sp(online, frozen, x0, c, &draws, s, cfg)?;
    ev.apply_to(online.params_mut())?;
    Ok(ev.result)
}
