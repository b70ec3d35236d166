mod common;

use common::{labels, mlp, randn, rng, unet};
use difflab::autodiff::{Float, ParamStore, Tape, Tensor, Var};
use difflab::models::{predict, Conditioning, Denoiser, ForwardOutput, ForwardRequest};
use difflab::oracles::{FiniteDataset, PosteriorOracle};
use difflab::sampler::{cfg_rescale, ddim_step, make_timestep_grid, sample, sample_from, SamplerConfig};
use difflab::schedule::{forward_diffuse, NoiseSchedule};
use difflab::Result;

/// Predicts `v = scale · x_t + offset(c)`: affine in the input, with a
/// class-dependent offset so guided and unguided paths differ.
struct AffineStub {
    scale: f64,
    offsets: Vec<f64>,
    params: ParamStore<f64>,
}

impl AffineStub {
    fn new(scale: f64) -> Self {
        Self { scale, offsets: vec![0.5, -0.25, 1.0, 0.0], params: ParamStore::new() }
    }

    fn v(&self, x: &[f64], c: Conditioning) -> Vec<f64> {
        let off = self.offsets[c.class_id().unwrap_or(3)];
        x.iter().map(|xi| self.scale * xi + off).collect()
    }
}

impl Denoiser<f64> for AffineStub {
    fn sample_shape(&self) -> &[usize] {
        &[2]
    }

    fn num_classes(&self) -> usize {
        3
    }

    fn timesteps(&self) -> usize {
        1000
    }

    fn params(&self) -> &ParamStore<f64> {
        &self.params
    }

    fn trace(&self, tape: &mut Tape<f64>, _: &[Var], x: Var, _t: &[usize], c: &[Conditioning], _: ForwardRequest) -> Result<ForwardOutput> {
        let xs = tape.value(x).to_vec();
        let out: Vec<f64> = xs.chunks(2).zip(c).flat_map(|(row, ci)| self.v(row, *ci)).collect();
        let v = tape.constant(Tensor::new([c.len(), 2], out)?);
        Ok(ForwardOutput { v: Some(v), features: vec![] })
    }
}

fn cfg(steps: usize, w: f64, phi: f64) -> SamplerConfig {
    SamplerConfig { steps, cfg_scale: w, rescale_phi: phi, record_trajectory: true }
}

#[test]
fn sampling_is_a_composition_of_ddim_steps() {
    let s = NoiseSchedule::default();
    let stub = AffineStub::new(-0.3);
    let c = vec![Conditioning::class(0), Conditioning::class(2), Conditioning::NULL];
    let x_t = randn::<f64>(&[3, 2], 1);
    let traj = sample_from(&stub, x_t.clone(), &c, &cfg(5, 1.0, 0.0), &s).unwrap();
    let grid = make_timestep_grid(5, 1000).unwrap();
    let mut x = x_t;
    for (i, &t) in grid.iter().enumerate() {
        let v = predict(&stub, &x, &vec![t; 3], &c).unwrap();
        x = ddim_step(&x, &v, t, grid.get(i + 1).copied().unwrap_or(0), &s).unwrap();
    }
    assert_eq!(traj.sample.data(), x.data());
    assert_eq!(traj.nfe, 5);
    assert_eq!(traj.records.iter().map(|r| r.t).collect::<Vec<_>>(), grid);
}

#[test]
fn guidance_queries_the_null_label_and_doubles_evaluations() {
    let s = NoiseSchedule::default();
    let stub = AffineStub::new(0.2);
    let c = vec![Conditioning::class(0), Conditioning::class(1)];
    let x_t = randn::<f64>(&[2, 2], 2);
    let w = 3.0;
    let traj = sample_from(&stub, x_t.clone(), &c, &cfg(25, w, 0.0), &s).unwrap();
    assert_eq!(traj.nfe, 50);
    // First step by hand: v = v_u + w (v_c − v_u).
    let r = &traj.records[0];
    for (i, ci) in c.iter().enumerate() {
        let row = &x_t.data()[2 * i..2 * i + 2];
        let (vc, vu) = (stub.v(row, *ci), stub.v(row, Conditioning::NULL));
        for j in 0..2 {
            let expect = vu[j] + w * (vc[j] - vu[j]);
            assert!((r.v.data()[2 * i + j] - expect).abs() < 1e-12);
        }
    }
    // Without guidance, or with only null labels, one query per step.
    assert_eq!(sample_from(&stub, x_t.clone(), &c, &cfg(25, 1.0, 0.0), &s).unwrap().nfe, 25);
    let null = vec![Conditioning::NULL; 2];
    assert_eq!(sample_from(&stub, x_t.clone(), &null, &cfg(25, 3.0, 0.7), &s).unwrap().nfe, 25);
    // w = 0 is the unconditional model alone.
    let w0 = sample_from(&stub, x_t.clone(), &c, &cfg(25, 0.0, 0.0), &s).unwrap();
    let unc = sample_from(&stub, x_t, &null, &cfg(25, 1.0, 0.0), &s).unwrap();
    assert_eq!(w0.nfe, 25);
    assert_eq!(w0.sample.data(), unc.sample.data());
}

#[test]
fn unit_guidance_reproduces_the_conditional_path_exactly() {
    let s = NoiseSchedule::default();
    for model in [mlp::<f32>(3), unet::<f32>(4)] {
        let c = labels(5);
        let plain = sample(&model, &c, &cfg(10, 1.0, 0.0), &s, &mut rng(5)).unwrap();
        let rescaled = sample(&model, &c, &cfg(10, 1.0, 0.7), &s, &mut rng(5)).unwrap();
        assert_eq!(plain.sample.data(), rescaled.sample.data());
        // The conditional path by hand.
        let mut x = Tensor::<f32>::randn(plain.records[0].x_t.shape().to_vec(), &mut rng(5));
        let grid = make_timestep_grid(10, 1000).unwrap();
        for (i, &t) in grid.iter().enumerate() {
            let v = predict(&model, &x, &vec![t; 5], &c).unwrap();
            x = ddim_step(&x, &v, t, grid.get(i + 1).copied().unwrap_or(0), &s).unwrap();
        }
        assert_eq!(plain.sample.data(), x.data());
    }
}

#[test]
fn rescale_with_zero_phi_is_the_identity() {
    let g = randn::<f32>(&[4, 3, 5], 6);
    let c = randn::<f32>(&[4, 3, 5], 7);
    assert_eq!(cfg_rescale(&g, &c, 0.0).unwrap().data(), g.data());
    let zero = Tensor::<f32>::zeros([2, 3]);
    assert_eq!(cfg_rescale(&zero, &randn(&[2, 3], 8), 0.7).unwrap().data(), zero.data());
}

#[test]
fn sampling_is_deterministic_given_the_seed() {
    let s = NoiseSchedule::default();
    let model = unet::<f32>(9);
    let c = labels(3);
    let a = sample(&model, &c, &cfg(8, 2.0, 0.7), &s, &mut rng(10)).unwrap();
    let b = sample(&model, &c, &cfg(8, 2.0, 0.7), &s, &mut rng(10)).unwrap();
    assert_eq!(a.sample.data(), b.sample.data());
    let other = sample(&model, &c, &cfg(8, 2.0, 0.7), &s, &mut rng(11)).unwrap();
    assert_ne!(a.sample.data(), other.sample.data());
}

#[test]
fn single_point_dataset_is_reached_from_any_start() {
    // With one training point the MLE flow collapses onto it: the first
    // step at t = T already predicts it exactly, and so does every later step.
    let s = NoiseSchedule::default();
    let point = Tensor::new([2], vec![0.6f32, -0.4]).unwrap();
    let oracle = PosteriorOracle::<f64>::new(FiniteDataset::from_points(&[point]).unwrap(), s.clone());
    let x_t = randn::<f64>(&[4, 2], 12);
    for steps in [1, 2, 25] {
        let traj = sample_from(&oracle, x_t.clone(), &[Conditioning::NULL; 4], &cfg(steps, 1.0, 0.0), &s).unwrap();
        for r in &traj.records {
            for row in r.x0_hat.data().chunks(2) {
                assert!((row[0] - 0.6).abs() < 1e-6 && (row[1] + 0.4).abs() < 1e-6, "t={} {row:?}", r.t);
            }
        }
        assert_eq!(traj.sample.data(), traj.records.last().unwrap().x0_hat.data());
    }
}

#[test]
fn first_query_sees_pure_noise() {
    let s = NoiseSchedule::default();
    let grid = make_timestep_grid(25, 1000).unwrap();
    assert_eq!(grid[0], 1000);
    let eps = randn::<f32>(&[3, 2], 13);
    let a = forward_diffuse(&randn::<f32>(&[3, 2], 14), &eps, 1000, &s).unwrap();
    let b = forward_diffuse(&randn::<f32>(&[3, 2], 15), &eps, 1000, &s).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(a.data(), eps.data());
}

#[test]
fn invalid_sampler_settings_are_rejected() {
    let s = NoiseSchedule::default();
    let model = mlp::<f32>(16);
    for bad in [cfg(0, 1.0, 0.0), cfg(1001, 1.0, 0.0), cfg(10, -1.0, 0.0), cfg(10, 2.0, 1.5), cfg(10, f64::NAN, 0.0)] {
        let err = sample(&model, &labels(2), &bad, &s, &mut rng(17)).unwrap_err();
        assert_eq!(err.exit_code(), 1, "{bad:?}");
    }
}

#[allow(dead_code)]
fn assert_float<T: Float>() {}
