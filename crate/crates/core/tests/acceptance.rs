//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! for its criterion (run with `--nocapture` to see them) and fails on FAIL.

mod common;

use std::time::Instant;

use common::{batch_shape, labels, param_gradcheck, randn, rng};
use difflab::ablation::{run_ablation, AblationAxis};
use difflab::autodiff::{ema_update, Adam, Tape, Tensor, Var};
use difflab::config::ExperimentConfig;
use difflab::datasets::{generate_dataset, DatasetParams};
use difflab::figures::emit_midpoint;
use difflab::models::{
    load_checkpoint, predict, predict_with_features, save_checkpoint, Conditioning, Denoiser, DenoiserModel, FeatureTap, MlpConfig,
    ModelConfig, UnetConfig,
};
use difflab::objectives::{evaluate_mse, evaluate_sp, mse_loss, FeatureDistance, MseDraws, SpConfig, SpDraws, TPrimeSampler};
use difflab::oracles::{mse_midpoint, posterior_optimal_v, FiniteDataset};
use difflab::run::{run_experiment, RunResult};
use difflab::sampler::{cfg_rescale, ddim_step, make_timestep_grid, sample, SamplerConfig};
use difflab::schedule::{
    forward_diffuse, forward_diffuse_on_tape, forward_diffuse_rows, v_target_rows, v_to_eps_on_tape, v_to_eps_rows, v_to_x0_on_tape, v_to_x0_rows,
    NoiseSchedule,
};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn report(n: usize, name: &str, ok: bool, detail: &str, started: Instant) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("{verdict} criterion {n:>2} {name}: {detail} [{:.1}s]", started.elapsed().as_secs_f64());
    assert!(ok, "criterion {n} ({name}) failed: {detail}");
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// 1. Self-perceptual fine-tuning beats the MSE baseline on both datasets.

const SEEDS: u64 = 5;

fn quality_config(dataset: &str, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::for_dataset(dataset);
    let settings: &[(&str, &str)] = match dataset {
        "gauss_mixture_8" => &[
            ("dataset_n", "4096"),
            ("holdout", "1024"),
            ("mlp_hidden", "128"),
            ("phase1_steps", "2000"),
            ("phase1_lr", "1e-3"),
            ("phase2_steps", "1000"),
            ("phase2_lr", "1e-4"),
            ("sp_tprime", "delta40"),
            ("eval_samples", "1024"),
        ],
        _ => &[
            ("dataset_n", "4096"),
            ("holdout", "512"),
            ("unet_channels", "8,16,32"),
            ("phase1_steps", "800"),
            ("phase1_batch", "64"),
            ("phase1_lr", "1e-3"),
            ("phase2_steps", "300"),
            ("phase2_batch", "64"),
            ("phase2_lr", "1e-4"),
            ("sp_tprime", "delta40"),
            ("eval_samples", "512"),
        ],
    };
    for (k, v) in settings {
        cfg.set(k, v).unwrap();
    }
    for (k, v) in [("eval_ema", "false"), ("mse_baseline", "true"), ("samplers", "25:1:0"), ("log_every", "1000000"), ("checkpoint_every", "1000000")] {
        cfg.set(k, v).unwrap();
    }
    cfg.seed = seed;
    cfg
}

fn energy(run: &RunResult, model: &str) -> f64 {
    run.report(model).unwrap().energy_distance
}

#[test]
fn criterion_01_self_perceptual_beats_mse() {
    let started = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let mut details = Vec::new();
    let mut ok = true;
    for dataset in ["gauss_mixture_8", "shapes16"] {
        let (mut base, mut sp, mut phase1) = (Vec::new(), Vec::new(), Vec::new());
        for seed in 0..SEEDS {
            let run = run_experiment(&quality_config(dataset, seed), root.path()).unwrap();
            base.push(energy(&run, "mse_baseline"));
            sp.push(energy(&run, "sp"));
            phase1.push(energy(&run, "mse"));
            std::fs::remove_dir_all(&run.dir).unwrap();
        }
        // Seeds pair the arms (same data, phase-1 model and sampling noise),
        // so the seed-to-seed spread is that of the per-seed gap.
        let gaps: Vec<f64> = base.iter().zip(&sp).map(|(b, s)| b - s).collect();
        let (gap, gap_sd) = mean_std(&gaps);
        let ((mb, sb), (ms, ss), (m1, _)) = (mean_std(&base), mean_std(&sp), mean_std(&phase1));
        let pass = gap > 0.0 && gap > 3.0 * gap_sd;
        ok &= pass;
        details.push(format!(
            "{dataset}: ED mse {mb:.5}±{sb:.5} sp {ms:.5}±{ss:.5} (phase-1 {m1:.5}); gap {gap:.5} vs 3σ {:.5} {}",
            3.0 * gap_sd,
            if pass { "ok" } else { "short" }
        ));
    }
    report(1, "self-perceptual energy distance below MSE by > 3σ", ok, &details.join("; "), started);
}

// ---------------------------------------------------------------------------
// 2. A converged MSE model reproduces the posterior-optimal flow.

#[test]
fn criterion_02_mse_model_matches_the_posterior_oracle() {
    let started = Instant::now();
    let s = NoiseSchedule::default();
    let data = FiniteDataset::new(vec![2], vec![1.0, 0.5, -0.7, 0.2, 0.3, -1.1, -0.4, -0.6], vec![None; 4], 0).unwrap();
    let mut r = rng(0);
    let mut online = ModelConfig::Mlp2d(MlpConfig { num_classes: 1, ..MlpConfig::default() }).build::<f32, _>(&mut r).unwrap();
    let mut ema = online.clone();
    let mut adam = Adam::new(1e-3);
    for _ in 0..3000 {
        let idx: Vec<usize> = (0..256).map(|_| r.random_range(0..data.len())).collect();
        let (x, c) = data.batch(&idx).unwrap();
        online.params_mut().zero_grad();
        mse_loss(&mut online, &x, &c, &mut r, &s).unwrap();
        adam.step(online.params_mut()).unwrap();
        ema_update(ema.params_mut(), online.params(), 0.995).unwrap();
    }
    // Probes: forward-diffused data points at noise levels ᾱ ∈ [0.05, 0.95].
    let ts: Vec<usize> = (1..=s.steps()).filter(|&t| (0.05..=0.95).contains(&s.alpha_bar(t))).collect();
    let mut probe = rng(1);
    let n = 2000;
    let t: Vec<usize> = (0..n).map(|_| ts[probe.random_range(0..ts.len())]).collect();
    let mut xs = Vec::with_capacity(2 * n);
    for &ti in &t {
        let p = data.point(probe.random_range(0..data.len()));
        for &pj in p {
            let e: f64 = StandardNormal.sample(&mut probe);
            xs.push(s.sqrt_alpha_bar(ti) * pj as f64 + s.sqrt_one_minus_alpha_bar(ti) * e);
        }
    }
    let x = Tensor::new([n, 2], xs).unwrap();
    let v = predict(&ema, &x.cast::<f32>(), &t, &vec![Conditioning::NULL; n]).unwrap();
    let mut err = 0.0;
    for (i, &ti) in t.iter().enumerate() {
        let row = Tensor::new([1, 2], x.data()[2 * i..2 * i + 2].to_vec()).unwrap();
        let want = posterior_optimal_v(&row, ti, &data, &s).unwrap();
        err += (0..2).map(|j| (v.data()[2 * i + j] as f64 - want.data()[j]).powi(2)).sum::<f64>();
    }
    let mse = err / (2 * n) as f64;
    report(2, "MSE model matches the posterior-optimal v", mse < 1e-2, &format!("mean squared error {mse:.2e} (limit 1e-2) over {n} probes"), started);
}

// ---------------------------------------------------------------------------
// 3. Re-noising the prediction is one DDIM step.

#[test]
fn criterion_03_renoising_is_a_ddim_step() {
    let started = Instant::now();
    let s = NoiseSchedule::default();
    let mut r = rng(3);
    let (mut tape_gap, mut oracle_gap): (f32, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let t = r.random_range(2..=1000);
        let tp = r.random_range(1..t);
        let x = randn::<f32>(&[1, 4], r.random());
        let v = randn::<f32>(&[1, 4], r.random());
        let step = ddim_step(&x, &v, t, tp, &s).unwrap();

        // The construction inside the self-perceptual loss, on the tape.
        let mut tape = Tape::<f32>::new();
        let (xv, vv) = (tape.constant(x.clone()), tape.constant(v.clone()));
        let x0 = v_to_x0_on_tape(&mut tape, vv, xv, &[t], &s).unwrap();
        let eps = v_to_eps_on_tape(&mut tape, vv, xv, &[t], &s).unwrap();
        let renoised = forward_diffuse_on_tape(&mut tape, x0, eps, &[tp], &s).unwrap();
        tape_gap = tape_gap.max(tape.tensor(renoised).max_abs_diff(&step).unwrap());

        // Deterministic DDIM in its ε form, written out independently.
        let (a, b) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
        let (a2, b2) = (s.alpha_bar(tp).sqrt(), (1.0 - s.alpha_bar(tp)).sqrt());
        for ((&xi, &vi), &yi) in x.data().iter().zip(v.data()).zip(step.data()) {
            let (xi, vi) = (xi as f64, vi as f64);
            let x0 = a * xi - b * vi;
            let eps = (xi - a * x0) / b;
            oracle_gap = oracle_gap.max((a2 * x0 + b2 * eps - yi as f64).abs());
        }
    }
    report(
        3,
        "re-noised prediction equals ddim_step",
        tape_gap <= 1e-5 && oracle_gap <= 1e-5,
        &format!("max deviation {tape_gap:.1e} from the loss construction, {oracle_gap:.1e} from the ε-form update, over 1000 tuples (limit 1e-5)"),
        started,
    );
}

// ---------------------------------------------------------------------------
// 4. Algebraic identities of the parameterization and the loss.

/// Predicts a fixed tensor regardless of input.
struct Fixed {
    v: Tensor<f64>,
    params: difflab::autodiff::ParamStore<f64>,
}

impl Denoiser<f64> for Fixed {
    fn sample_shape(&self) -> &[usize] {
        &self.v.shape()[1..]
    }
    fn num_classes(&self) -> usize {
        3
    }
    fn timesteps(&self) -> usize {
        1000
    }
    fn params(&self) -> &difflab::autodiff::ParamStore<f64> {
        &self.params
    }
    fn trace(
        &self,
        tape: &mut Tape<f64>,
        _: &[Var],
        _: Var,
        _: &[usize],
        _: &[Conditioning],
        _: difflab::models::ForwardRequest,
    ) -> difflab::Result<difflab::models::ForwardOutput> {
        Ok(difflab::models::ForwardOutput { v: Some(tape.constant(self.v.clone())), features: vec![] })
    }
}

#[test]
fn criterion_04_algebraic_identities() {
    let started = Instant::now();
    let s = NoiseSchedule::default();
    let mut r = rng(4);
    let (mut trip, mut collision): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let t = r.random_range(1..=1000);
        let x = randn::<f64>(&[2, 3], r.random());
        let v = randn::<f64>(&[2, 3], r.random());
        let x0 = v_to_x0_rows(&v, &x, &[t, t], &s).unwrap();
        let eps = v_to_eps_rows(&v, &x, &[t, t], &s).unwrap();
        trip = trip.max(v_target_rows(&x0, &eps, &[t, t], &s).unwrap().max_abs_diff(&v).unwrap());
        trip = trip.max(forward_diffuse_rows(&x0, &eps, &[t, t], &s).unwrap().max_abs_diff(&x).unwrap());
        collision = collision.max(forward_diffuse_rows(&x0, &eps, &[t, t], &s).unwrap().max_abs_diff(&x).unwrap());
    }

    // The loss itself: t′ = t for an arbitrary network, and an exact prediction.
    let frozen = common::unet::<f64>(5).freeze_copy().unwrap();
    let x0 = randn::<f64>(&batch_shape(&frozen, 4), 6);
    let c = labels(4);
    let mut collided_loss: f64 = 0.0;
    let mut exact_loss: f64 = 0.0;
    for tap in FeatureTap::ALL {
        for distance in [FeatureDistance::Mse, FeatureDistance::Mae] {
            let cfg = SpConfig { tap, tprime: TPrimeSampler::UniformInt, distance, ..SpConfig::default() };
            let mut draws = SpDraws::<f64>::sample(x0.shape(), &s, &cfg, &mut r);
            let online = common::unet::<f64>(7);
            draws.tprime = draws.t.clone();
            collided_loss = collided_loss.max(evaluate_sp(&online, &frozen, &x0, &c, &draws, &s, &cfg).unwrap().result.loss);
            let draws = SpDraws::<f64>::sample(x0.shape(), &s, &cfg, &mut r);
            let exact = Fixed { v: v_target_rows(&x0, &draws.eps, &draws.t, &s).unwrap(), params: Default::default() };
            exact_loss = exact_loss.max(evaluate_sp(&exact, &frozen, &x0, &c, &draws, &s, &cfg).unwrap().result.loss);
        }
    }
    let ok = trip <= 1e-5 && collision <= 1e-6 && collided_loss <= 1e-6 && exact_loss <= 1e-6;
    report(
        4,
        "round trips, t′ = t collision, zero loss at the target",
        ok,
        &format!("round trip {trip:.1e}, collision {collision:.1e}, loss at t′=t {collided_loss:.1e}, loss at v̂=v {exact_loss:.1e}"),
        started,
    );
}

// ---------------------------------------------------------------------------
// 5. Schedule invariants.

#[test]
fn criterion_05_schedule_invariants() {
    let started = Instant::now();
    let s = NoiseSchedule::default();
    let ab = s.alpha_bar_table();
    let decreasing = ab.windows(2).all(|w| w[1] < w[0]) && ab[0] < 1.0;
    let terminal = s.alpha_bar(s.steps()) == 0.0;
    let grid = make_timestep_grid(25, s.steps()).unwrap();
    let starts = grid[0] == s.steps();
    let eps = randn::<f32>(&[8, 3], 1);
    let a = forward_diffuse(&randn::<f32>(&[8, 3], 2), &eps, s.steps(), &s).unwrap();
    let far = randn::<f32>(&[8, 3], 3);
    let far = Tensor::new(far.shape().to_vec(), far.data().iter().map(|v| 100.0 * v).collect()).unwrap();
    let b = forward_diffuse(&far, &eps, s.steps(), &s).unwrap();
    let independent = a.data() == b.data();
    report(
        5,
        "schedule and grid invariants",
        decreasing && terminal && starts && independent,
        &format!(
            "strictly decreasing {decreasing} over {} entries, ᾱ_T == 0 {terminal}, grid starts at {}, x_T independent of x0 {independent}",
            ab.len(),
            grid[0]
        ),
        started,
    );
}

// ---------------------------------------------------------------------------
// 6. Gradients agree with central finite differences.

/// Worst `|g − fd| / (1e-3·max(|g|, |fd|) + 1e-6)` over every input element.
fn op_gradcheck(inputs: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    const H: f64 = 1e-6;
    let eval = |ins: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &vars);
        tape.item(loss)
    };
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.clone().with_requires_grad(true)).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.numel()]);
        for j in 0..input.numel() {
            let (mut plus, mut minus) = (inputs.to_vec(), inputs.to_vec());
            plus[i].data_mut()[j] += H;
            minus[i].data_mut()[j] -= H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max((analytic[j] - fd).abs() / (1e-3 * analytic[j].abs().max(fd.abs()) + 1e-6));
        }
    }
    worst
}

/// Weighted sum with fixed random weights, so every output element matters.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let w = tape.constant(randn(tape.shape(y), seed));
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

#[test]
fn criterion_06_gradients_match_finite_differences() {
    let started = Instant::now();
    let r = |shape: &[usize], seed: u64| randn::<f64>(shape, seed);
    let mut results: Vec<(&str, f64)> = vec![
        ("add", op_gradcheck(&[r(&[3, 4], 1), r(&[4], 2)], |t, v| { let y = t.add(v[0], v[1]).unwrap(); probe(t, y, 9) })),
        ("sub", op_gradcheck(&[r(&[3, 4], 1), r(&[3, 4], 2)], |t, v| { let y = t.sub(v[0], v[1]).unwrap(); probe(t, y, 9) })),
        ("mul", op_gradcheck(&[r(&[3, 4], 1), r(&[3, 4], 2)], |t, v| { let y = t.mul(v[0], v[1]).unwrap(); probe(t, y, 9) })),
        ("scale", op_gradcheck(&[r(&[5], 1)], |t, v| { let y = t.scale(v[0], -1.7); probe(t, y, 9) })),
        ("scale_rows", op_gradcheck(&[r(&[3, 4], 1)], |t, v| { let y = t.scale_rows(v[0], &[0.5, -2.0, 1.5]).unwrap(); probe(t, y, 9) })),
        ("silu", op_gradcheck(&[r(&[20], 1)], |t, v| { let y = t.silu(v[0]); probe(t, y, 9) })),
        ("matmul", op_gradcheck(&[r(&[3, 4], 1), r(&[4, 5], 2)], |t, v| { let y = t.matmul(v[0], v[1]).unwrap(); probe(t, y, 9) })),
        ("linear", op_gradcheck(&[r(&[3, 4], 1), r(&[4, 5], 2), r(&[5], 3)], |t, v| { let y = t.linear(v[0], v[1], v[2]).unwrap(); probe(t, y, 9) })),
        ("conv2d stride 1", op_gradcheck(&[r(&[2, 3, 5, 5], 1), r(&[4, 3, 3, 3], 2), r(&[4], 3)], |t, v| { let y = t.conv2d(v[0], v[1], Some(v[2]), 1).unwrap(); probe(t, y, 9) })),
        ("conv2d stride 2", op_gradcheck(&[r(&[2, 3, 6, 6], 1), r(&[4, 3, 3, 3], 2)], |t, v| { let y = t.conv2d(v[0], v[1], None, 2).unwrap(); probe(t, y, 9) })),
        ("group_norm", op_gradcheck(&[r(&[2, 4, 3, 3], 1), r(&[4], 2), r(&[4], 3)], |t, v| { let y = t.group_norm(v[0], v[1], v[2], 2, 1e-5).unwrap(); probe(t, y, 9) })),
        ("layer_norm", op_gradcheck(&[r(&[3, 6], 1), r(&[6], 2), r(&[6], 3)], |t, v| { let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(); probe(t, y, 9) })),
        ("add_channel", op_gradcheck(&[r(&[2, 3, 2, 2], 1), r(&[2, 3], 2)], |t, v| { let y = t.add_channel(v[0], v[1]).unwrap(); probe(t, y, 9) })),
        ("concat1", op_gradcheck(&[r(&[2, 3, 2, 2], 1), r(&[2, 1, 2, 2], 2)], |t, v| { let y = t.concat1(&[v[0], v[1]]).unwrap(); probe(t, y, 9) })),
        ("upsample2x", op_gradcheck(&[r(&[2, 2, 3, 3], 1)], |t, v| { let y = t.upsample2x(v[0]).unwrap(); probe(t, y, 9) })),
        ("gather_rows", op_gradcheck(&[r(&[4, 3], 1)], |t, v| { let y = t.gather_rows(v[0], &[2, 0, 2, 3]).unwrap(); probe(t, y, 9) })),
        ("reshape", op_gradcheck(&[r(&[2, 6], 1)], |t, v| { let y = t.reshape(v[0], &[3, 4]).unwrap(); probe(t, y, 9) })),
        ("mean", op_gradcheck(&[r(&[7], 1)], |t, v| { let y = t.mean(v[0]); t.mul(y, y).unwrap() })),
        ("mse_reduce", op_gradcheck(&[r(&[3, 4], 1), r(&[3, 4], 2)], |t, v| t.mse_reduce(v[0], v[1]).unwrap())),
        ("mae_reduce", op_gradcheck(&[r(&[3, 4], 1), r(&[3, 4], 2)], |t, v| t.mae_reduce(v[0], v[1]).unwrap())),
    ];

    // Whole denoisers under both objectives.
    let s = NoiseSchedule::default();
    let mut g = rng(6);
    for (name, model) in [("mlp", common::mlp::<f64>(10)), ("unet", common::unet::<f64>(11))] {
        let x0 = randn::<f64>(&batch_shape(&model, 3), 12);
        let c = labels(3);
        let draws = MseDraws::<f64>::sample(x0.shape(), &s, &mut g);
        let analytic = evaluate_mse(&model, &x0, &c, &draws, &s).unwrap().grads;
        let (worst, _) = param_gradcheck(&model, &analytic, 6, |m| evaluate_mse(m, &x0, &c, &draws, &s).unwrap().result.loss);
        results.push((if name == "mlp" { "mlp mse loss" } else { "unet mse loss" }, worst));

        let frozen = model.cast::<f64>().freeze_copy().unwrap();
        let online = if name == "mlp" { common::mlp::<f64>(13) } else { common::unet::<f64>(14) };
        let cfg = SpConfig { tap: FeatureTap::EncoderPlusMid, ..SpConfig::default() };
        let draws = SpDraws::<f64>::sample(x0.shape(), &s, &cfg, &mut g);
        let analytic = evaluate_sp(&online, &frozen, &x0, &c, &draws, &s, &cfg).unwrap().grads;
        let (worst, _) = param_gradcheck(&online, &analytic, 6, |m| evaluate_sp(m, &frozen, &x0, &c, &draws, &s, &cfg).unwrap().result.loss);
        results.push((if name == "mlp" { "mlp self-perceptual loss" } else { "unet self-perceptual loss" }, worst));
    }
    let (worst_name, worst) = results.iter().fold(("", 0.0f64), |acc, &(n, w)| if w > acc.1 { (n, w) } else { acc });
    report(
        6,
        "analytic gradients match central differences",
        worst <= 1.0,
        &format!("{} checks, worst {worst:.3} of the 1e-3 relative budget ({worst_name})", results.len()),
        started,
    );
}

// ---------------------------------------------------------------------------
// 7. Guidance contracts.

#[test]
fn criterion_07_guidance_contracts() {
    let started = Instant::now();
    let s = NoiseSchedule::default();
    let model = common::unet::<f32>(20);
    let c = labels(4);
    let plain = SamplerConfig { steps: 25, cfg_scale: 1.0, rescale_phi: 0.0, record_trajectory: false };
    let unit = sample(&model, &c, &SamplerConfig { rescale_phi: 0.7, ..plain.clone() }, &s, &mut rng(21)).unwrap();
    let conditional = sample(&model, &c, &plain, &s, &mut rng(21)).unwrap();
    // The conditional path by hand.
    let mut x = Tensor::<f32>::randn(batch_shape(&model, 4), &mut rng(21));
    let grid = make_timestep_grid(25, s.steps()).unwrap();
    for (i, &t) in grid.iter().enumerate() {
        let v = predict(&model, &x, &[t; 4], &c).unwrap();
        x = ddim_step(&x, &v, t, grid.get(i + 1).copied().unwrap_or(0), &s).unwrap();
    }
    let exact = unit.sample.data() == conditional.sample.data() && conditional.sample.data() == x.data();
    let guided = sample(&model, &c, &SamplerConfig { cfg_scale: 3.0, rescale_phi: 0.7, ..plain.clone() }, &s, &mut rng(21)).unwrap();
    let g = randn::<f32>(&[4, 1, 8, 8], 22);
    let identity = cfg_rescale(&g, &randn::<f32>(&[4, 1, 8, 8], 23), 0.0).unwrap().data() == g.data();
    let ok = exact && conditional.nfe == 25 && guided.nfe == 50 && identity;
    report(
        7,
        "w = 1 is the conditional path, guidance doubles NFE, φ = 0 rescale is the identity",
        ok,
        &format!("w=1 exact {exact}, NFE {} unguided / {} guided, rescale identity {identity}", conditional.nfe, guided.nfe),
        started,
    );
}

// ---------------------------------------------------------------------------
// 8. The MSE midpoint of two samples is their average.

#[test]
fn criterion_08_midpoint_is_the_average() {
    let started = Instant::now();
    let mut r = rng(8);
    let xs: Vec<Tensor<f64>> = (0..12).map(|_| randn(&[6], r.random())).collect();
    let mut m = vec![0.0f64; 6];
    for _ in 0..5000 {
        for (j, mj) in m.iter_mut().enumerate() {
            let grad: f64 = xs.iter().map(|x| 2.0 * (*mj - x.data()[j])).sum();
            *mj -= 0.01 * grad;
        }
    }
    let mid = mse_midpoint(&xs).unwrap();
    let descent = mid.data().iter().zip(&m).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let dir = tempfile::tempdir().unwrap();
    let shapes = generate_dataset("shapes16", &DatasetParams { n: 16, ..DatasetParams::default() }, &mut rng(9)).unwrap();
    emit_midpoint(dir.path(), &shapes, "acceptance").unwrap();
    let csv = std::fs::read_to_string(dir.path().join("midpoint.csv")).unwrap();
    let mut blend: f64 = 0.0;
    let mut pixels = 0;
    for line in csv.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        blend = blend.max((f[3] - 0.5 * (f[1] + f[2])).abs());
        pixels += 1;
    }
    let distinct = csv.lines().filter(|l| !l.starts_with('#')).skip(1).any(|l| {
        let f: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
        f[1] != f[2]
    });
    let ok = descent < 1e-4 && blend < 1e-6 && pixels == 256 && distinct;
    report(
        8,
        "MSE midpoint is the average, shapes16 midpoint is the pixel blend",
        ok,
        &format!("descent gap {descent:.1e} (limit 1e-4), blend deviation {blend:.1e} over {pixels} pixels (limit 1e-6)"),
        started,
    );
}

// ---------------------------------------------------------------------------
// 9. Ablation sweeps reproduce the table layouts.

fn ablation_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::for_dataset("shapes16");
    for (k, v) in [
        ("dataset_n", "300"),
        ("holdout", "48"),
        ("unet_channels", "4,8,8"),
        ("time_dim", "8"),
        ("phase1_steps", "10"),
        ("phase2_steps", "5"),
        ("phase1_batch", "8"),
        ("phase2_batch", "8"),
        ("eval_samples", "16"),
        ("samplers", "5:1:0"),
        ("log_every", "1000"),
        ("checkpoint_every", "1000"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

#[test]
fn criterion_09_ablation_tables() {
    let started = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let base = ablation_config();
    let expected: [(AblationAxis, &[&str]); 5] = [
        (AblationAxis::Tap, &["All Encoder Layers", "All Decoder Layers", "All Encoder Layers + Midblock Layer", "Only Midblock Layer"]),
        (AblationAxis::TPrime, &["t'=t±40", "t'~N(t,100)", "t'~U(1,T)"]),
        (AblationAxis::Distance, &["Mean Absolute Distance", "Mean Squared Distance"]),
        (AblationAxis::PerceptualSource, &["MSE model as perceptual network", "SP model as perceptual network"]),
        (AblationAxis::CfgScale, &["MSE,7.5,0.7", "SP,,", "SP,2,0.7", "SP,3,0.7", "SP,4,0.7", "SP,7.5,0.7"]),
    ];
    let mut problems = Vec::new();
    for (axis, rows) in expected {
        let (table, path) = run_ablation(axis, None, &base, root.path()).unwrap();
        let labels: Vec<&str> = table.rows.iter().map(|r| r.label.as_str()).collect();
        if labels != rows {
            problems.push(format!("{}: rows {labels:?}", axis.name()));
        }
        let csv = std::fs::read_to_string(&path).unwrap();
        if !csv.starts_with(&format!("# config {}", base.hash())) || csv.lines().count() != rows.len() + 2 {
            problems.push(format!("{}: csv layout", axis.name()));
        }
        if table.rows.iter().any(|r| !r.report.energy_distance.is_finite()) {
            problems.push(format!("{}: non-finite metric", axis.name()));
        }
    }
    // The repeat experiment through the main pipeline.
    let mut repeat = base.clone();
    repeat.set("perceptual_source", "sp").unwrap();
    let run = run_experiment(&repeat, root.path()).unwrap();
    let repeated = run.manifest.checkpoints.iter().any(|c| c.starts_with("phase2_repeat")) && run.report("sp").is_some();
    if !repeated {
        problems.push("repeat run missing its second fine-tune".into());
    }
    let detail = if problems.is_empty() { "tap 4 rows, t′ 3 rows, distance 2 rows, source 2 rows, guidance 6 rows; repeat fine-tune ran".to_string() } else { problems.join("; ") };
    report(9, "ablation row structure and repeat experiment", problems.is_empty(), &detail, started);
}

// ---------------------------------------------------------------------------
// 10. Determinism and persistence.

fn determinism_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::for_dataset("gauss_mixture_8");
    for (k, v) in [
        ("dataset_n", "1000"),
        ("holdout", "200"),
        ("mlp_hidden", "32"),
        ("phase1_steps", "60"),
        ("phase2_steps", "30"),
        ("phase1_batch", "64"),
        ("phase2_batch", "64"),
        ("eval_samples", "200"),
        ("samplers", "25:1:0,25:3:0.7"),
        ("checkpoint_every", "20"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.seed = 17;
    cfg
}

#[test]
fn criterion_10_determinism_and_persistence() {
    let started = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = determinism_config();
    let ra = run_experiment(&cfg, a.path()).unwrap();
    let rb = run_experiment(&cfg, b.path()).unwrap();
    let same_metrics = ra.metrics == rb.metrics;
    let same_manifest = ra.manifest == rb.manifest;

    let mut round_trip = true;
    let models: Vec<DenoiserModel> = vec![
        load_checkpoint(&ra.dir.join("phase2_ema.ckpt")).unwrap(),
        ModelConfig::TinyUnet(UnetConfig { channels: [8, 16, 16], ..UnetConfig::default() }).build(&mut rng(30)).unwrap(),
    ];
    for (i, m) in models.iter().enumerate() {
        let path = a.path().join(format!("copy{i}.ckpt"));
        save_checkpoint(m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let x = randn::<f32>(&batch_shape(m, 6), 31);
        let t = [1, 40, 300, 700, 999, 1000];
        let c = [Conditioning::NULL, Conditioning::class(0), Conditioning::class(1), Conditioning::NULL, Conditioning::class(2), Conditioning::class(3)];
        let (v1, f1) = predict_with_features(m, &x, &t, &c, FeatureTap::EncoderPlusMid).unwrap();
        let (v2, f2) = predict_with_features(&back, &x, &t, &c, FeatureTap::EncoderPlusMid).unwrap();
        round_trip &= v1.data() == v2.data() && f1.iter().zip(&f2).all(|(p, q)| p.data() == q.data());
    }
    // Guided sampling from the restored model follows the same trajectory.
    let restored = load_checkpoint(&ra.dir.join("phase2_ema.ckpt")).unwrap();
    let cfg_s = SamplerConfig { steps: 25, cfg_scale: 3.0, rescale_phi: 0.7, record_trajectory: true };
    let c = labels(8);
    let s = NoiseSchedule::default();
    let t1 = sample(&models[0], &c, &cfg_s, &s, &mut rng(32)).unwrap();
    let t2 = sample(&restored, &c, &cfg_s, &s, &mut rng(32)).unwrap();
    round_trip &= t1.sample.data() == t2.sample.data();

    let ok = same_metrics && same_manifest && round_trip;
    report(
        10,
        "bit-exact reruns and checkpoint round trips",
        ok,
        &format!("metrics identical {same_metrics}, manifests identical {same_manifest}, forward/feature/sampling round trip exact {round_trip}"),
        started,
    );
}
