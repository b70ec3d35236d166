mod common;

use common::{batch_shape, labels, mlp, param_gradcheck, randn, rng, unet};
use difflab::autodiff::{Adam, Tensor};
use difflab::models::{Denoiser, DenoiserModel, FeatureTap};
use difflab::objectives::{
    evaluate_mse, evaluate_sp, sample_tprime, sp_loss, FeatureDistance, MseDraws, SpConfig, SpDraws, TPrimeSampler,
};
use difflab::oracles::{FiniteDataset, PosteriorOracle};
use difflab::sampler::ddim_transition;
use difflab::schedule::{forward_diffuse_rows, v_to_eps_rows, v_to_x0_rows, NoiseSchedule};
use difflab::LabError;
use rand::Rng;

fn sp_cfg(tap: FeatureTap, distance: FeatureDistance) -> SpConfig {
    SpConfig { tap, distance, ..SpConfig::default() }
}

#[test]
fn collision_makes_the_loss_vanish_for_any_prediction() {
    let s = NoiseSchedule::default();
    for (seed, online, frozen) in [(0, mlp::<f32>(1), mlp::<f32>(2)), (1, unet::<f32>(3), unet::<f32>(4))] {
        let frozen = frozen.freeze_copy().unwrap();
        let shape = batch_shape(&online, 6);
        let x0 = randn(&shape, 10 + seed);
        let c = labels(6);
        let t = vec![1, 40, 300, 600, 999, 1000];
        let draws = SpDraws { t: t.clone(), eps: randn(&shape, 20 + seed), tprime: t };
        for tap in FeatureTap::ALL {
            for distance in [FeatureDistance::Mse, FeatureDistance::Mae] {
                let ev = evaluate_sp(&online, &frozen, &x0, &c, &draws, &s, &sp_cfg(tap, distance)).unwrap();
                assert!(ev.result.loss.abs() < 1e-6, "{tap:?}/{distance:?}: {}", ev.result.loss);
            }
        }
    }
}

#[test]
fn exact_prediction_has_zero_loss() {
    // On a one-point dataset the posterior-optimal v equals the regression target.
    let s = NoiseSchedule::default();
    let point = Tensor::new([2], vec![0.3f32, -0.7]).unwrap();
    let data = FiniteDataset::from_points(&[point.clone()]).unwrap();
    let oracle = PosteriorOracle::<f32>::new(data, s.clone());
    let frozen = mlp::<f32>(5).freeze_copy().unwrap();
    let n = 8;
    let x0 = Tensor::new([n, 2], point.data().repeat(n)).unwrap();
    let c = vec![difflab::models::Conditioning::NULL; n];
    let mut r = rng(6);
    for tap in FeatureTap::ALL {
        let cfg = sp_cfg(tap, FeatureDistance::Mse);
        let t: Vec<usize> = (0..n).map(|_| r.random_range(1..1000)).collect();
        let tprime = t.iter().map(|&t| sample_tprime(t, 1000, &cfg.tprime, &mut r)).collect();
        let draws = SpDraws { t, eps: randn(&[n, 2], 7), tprime };
        let ev = evaluate_sp(&oracle, &frozen, &x0, &c, &draws, &s, &cfg).unwrap();
        assert!(ev.result.loss < 1e-6, "{tap:?}: {}", ev.result.loss);
        let mse = evaluate_mse(&oracle, &x0, &c, &MseDraws { t: draws.t.clone(), eps: draws.eps.clone() }, &s).unwrap();
        assert!(mse.result.loss < 1e-6);
    }
}

#[test]
fn perceptual_network_is_untouched_and_unwritable() {
    let s = NoiseSchedule::default();
    let mut online = unet::<f32>(8);
    let frozen = online.freeze_copy().unwrap();
    let before = frozen.clone();
    let shape = batch_shape(&online, 4);
    let x0 = randn(&shape, 9);
    let c = labels(4);
    let mut adam = Adam::new(1e-3);
    let mut r = rng(10);
    for _ in 0..3 {
        online.params_mut().zero_grad();
        sp_loss(&mut online, &frozen, &x0, &c, &mut r, &s, &SpConfig::default()).unwrap();
        adam.step(online.params_mut()).unwrap();
    }
    assert!(frozen.params().bit_identical(before.params()));
    assert!(frozen.params().iter().all(|(_, t)| t.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0))));
    assert!(!online.params().bit_identical(before.params()), "online weights should move");

    // A trainable network in the perceptual slot is a contract violation.
    let draws = SpDraws::sample(&shape, &s, &SpConfig::default(), &mut r);
    let err = evaluate_sp(&online, &online, &x0, &c, &draws, &s, &SpConfig::default()).unwrap_err();
    assert!(matches!(err, LabError::Contract(_)));
}

#[test]
fn midblock_tap_sends_gradient_only_through_the_encoder_path() {
    let s = NoiseSchedule::default();
    let online = unet::<f32>(11);
    let frozen = unet::<f32>(12).freeze_copy().unwrap();
    let shape = batch_shape(&online, 3);
    let cfg = SpConfig::default();
    let draws = SpDraws::sample(&shape, &s, &cfg, &mut rng(13));
    let ev = evaluate_sp(&online, &frozen, &randn(&shape, 14), &labels(3), &draws, &s, &cfg).unwrap();
    assert_eq!(ev.grads.len(), online.params().len());
    // Every online parameter feeds v̂ and therefore the loss.
    let reached = ev.grads.iter().filter(|g| g.as_ref().is_some_and(|g| g.iter().any(|&v| v != 0.0))).count();
    assert!(reached > online.params().len() / 2, "only {reached} parameters received gradient");
}

#[test]
fn renoised_prediction_is_one_ddim_transition() {
    let s = NoiseSchedule::default();
    let mut r = rng(15);
    let mut worst: f32 = 0.0;
    for _ in 0..1000 {
        let t = r.random_range(1..=1000);
        let tp = loop {
            let tp = r.random_range(1..=1000);
            if tp != t {
                break tp;
            }
        };
        let x = randn::<f32>(&[1, 3], r.random());
        let v = randn::<f32>(&[1, 3], r.random());
        let x0 = v_to_x0_rows(&v, &x, &[t], &s).unwrap();
        let eps = v_to_eps_rows(&v, &x, &[t], &s).unwrap();
        let renoised = forward_diffuse_rows(&x0, &eps, &[tp], &s).unwrap();
        worst = worst.max(renoised.max_abs_diff(&ddim_transition(&x, &v, t, tp, &s).unwrap()).unwrap());
    }
    assert!(worst <= 1e-5, "{worst}");
}

fn mse_objective(model: &DenoiserModel<f64>, x0: &Tensor<f64>, draws: &MseDraws<f64>, s: &NoiseSchedule) -> f64 {
    evaluate_mse(model, x0, &labels(x0.shape()[0]), draws, s).unwrap().result.loss
}

#[test]
fn full_denoiser_gradients_match_finite_differences() {
    let s = NoiseSchedule::default();
    for model in [mlp::<f64>(16), unet::<f64>(17)] {
        let shape = batch_shape(&model, 3);
        let x0 = randn::<f64>(&shape, 18);
        let draws = MseDraws::sample(&shape, &s, &mut rng(19));
        let ev = evaluate_mse(&model, &x0, &labels(3), &draws, &s).unwrap();
        let (worst, at) = param_gradcheck(&model, &ev.grads, 6, |m| mse_objective(m, &x0, &draws, &s));
        assert!(worst <= 1.0, "MSE gradient violation {worst} at {at}");
    }
}

#[test]
fn self_perceptual_gradients_match_finite_differences() {
    let s = NoiseSchedule::default();
    for (online, frozen) in [(mlp::<f64>(20), mlp::<f64>(21)), (unet::<f64>(22), unet::<f64>(23))] {
        let frozen = frozen.freeze_copy().unwrap();
        let shape = batch_shape(&online, 3);
        let x0 = randn::<f64>(&shape, 24);
        for (tap, distance) in [(FeatureTap::MidOnly, FeatureDistance::Mse), (FeatureTap::EncoderAll, FeatureDistance::Mae)] {
            let cfg = SpConfig { tap, distance, tprime: TPrimeSampler::DeltaStep(40), ..SpConfig::default() };
            let draws = SpDraws::sample(&shape, &s, &cfg, &mut rng(25));
            let ev = evaluate_sp(&online, &frozen, &x0, &labels(3), &draws, &s, &cfg).unwrap();
            let (worst, at) = param_gradcheck(&online, &ev.grads, 4, |m| {
                evaluate_sp(m, &frozen, &x0, &labels(3), &draws, &s, &cfg).unwrap().result.loss
            });
            assert!(worst <= 1.0, "{tap:?}/{distance:?}: violation {worst} at {at}");
        }
    }
}

#[test]
fn draws_are_reproducible_from_the_seed() {
    let s = NoiseSchedule::default();
    let cfg = SpConfig { tprime: TPrimeSampler::GaussianAroundT(100.0), ..SpConfig::default() };
    let a: SpDraws<f32> = SpDraws::sample(&[16, 2], &s, &cfg, &mut rng(26));
    let b: SpDraws<f32> = SpDraws::sample(&[16, 2], &s, &cfg, &mut rng(26));
    assert_eq!(a.t, b.t);
    assert_eq!(a.tprime, b.tprime);
    assert_eq!(a.eps.data(), b.eps.data());
    assert!(a.t.iter().zip(&a.tprime).all(|(t, tp)| t != tp && (1..=1000).contains(tp)));
}
