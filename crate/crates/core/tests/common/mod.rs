#![allow(dead_code)]

use difflab::autodiff::{Float, Tensor};
use difflab::models::{Conditioning, Denoiser, DenoiserModel, MlpConfig, ModelConfig, UnetConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_mlp_config() -> MlpConfig {
    MlpConfig { hidden: 16, time_dim: 8, class_dim: 4, num_classes: 3, ..MlpConfig::default() }
}

pub fn small_unet_config() -> UnetConfig {
    UnetConfig { image_size: 8, channels: [4, 8, 8], time_dim: 8, num_classes: 3, ..UnetConfig::default() }
}

pub fn mlp<T: Float>(seed: u64) -> DenoiserModel<T> {
    ModelConfig::Mlp2d(small_mlp_config()).build(&mut rng(seed)).unwrap()
}

pub fn unet<T: Float>(seed: u64) -> DenoiserModel<T> {
    ModelConfig::TinyUnet(small_unet_config()).build(&mut rng(seed)).unwrap()
}

/// Mixed labels, including the null token.
pub fn labels(n: usize) -> Vec<Conditioning> {
    (0..n).map(|i| if i % 4 == 3 { Conditioning::NULL } else { Conditioning::class(i % 3) }).collect()
}

pub fn batch_shape<T: Float>(model: &DenoiserModel<T>, n: usize) -> Vec<usize> {
    let mut shape = vec![n];
    shape.extend_from_slice(model.sample_shape());
    shape
}

pub fn randn<T: Float>(shape: &[usize], seed: u64) -> Tensor<T> {
    Tensor::randn(shape.to_vec(), &mut rng(seed))
}

/// Central finite-difference check of parameter gradients.
///
/// `loss` evaluates the scalar objective for a model; `analytic` are the
/// gradients in parameter-store order. At most `per_tensor` entries of each
/// parameter are probed. Returns the worst ratio
/// `|g − fd| / (1e-3·max(|g|, |fd|) + 1e-6)` (values ≤ 1 pass) and where it
/// occurred.
pub fn param_gradcheck(
    model: &DenoiserModel<f64>,
    analytic: &[Option<Vec<f64>>],
    per_tensor: usize,
    loss: impl Fn(&DenoiserModel<f64>) -> f64,
) -> (f64, String) {
    const H: f64 = 1e-5;
    let mut worst = (0.0, String::new());
    for (i, g) in analytic.iter().enumerate() {
        let n = model.params().tensor(i).numel();
        let stride = (n / per_tensor.max(1)).max(1);
        for j in (0..n).step_by(stride).take(per_tensor) {
            let mut plus = model.clone();
            plus.params_mut().tensor_mut(i).data_mut()[j] += H;
            let mut minus = model.clone();
            minus.params_mut().tensor_mut(i).data_mut()[j] -= H;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * H);
            let a = g.as_ref().map_or(0.0, |g| g[j]);
            let ratio = (a - fd).abs() / (1e-3 * a.abs().max(fd.abs()) + 1e-6);
            if ratio > worst.0 {
                worst = (ratio, format!("{}[{j}]: analytic {a:e}, numeric {fd:e}", model.params().names()[i]));
            }
        }
    }
    worst
}
