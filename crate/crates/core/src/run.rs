//! End-to-end experiment: data, MSE phase, self-perceptual phase, matched
//! MSE baseline, evaluation, figures and a reproducibility manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use difflab_autodiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{hex_digest, ExperimentConfig, PerceptualSource};
use crate::datasets::{generate_dataset, ingest_images, shuffled};
use crate::error::{LabError, Result};
use crate::figures::{emit_midpoint, emit_model_figures};
use crate::metrics::MetricReport;
use crate::models::{load_checkpoint, save_checkpoint, Conditioning, DenoiserModel};
use crate::oracles::FiniteDataset;
use crate::sampler::{sample, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::train::{train_phase, Objective, PhaseOptions, TrainState};

/// Independent rng streams derived from the experiment seed.
pub mod streams {
    pub const DATA: u64 = 0;
    pub const INIT: u64 = 1;
    pub const PHASE1: u64 = 2;
    pub const PHASE2: u64 = 3;
    pub const REPEAT: u64 = 4;
    pub const BASELINE: u64 = 5;
    pub const EVAL: u64 = 16;
}

const SOURCES: &[(&str, &str)] = &[
    ("autodiff/src/lib.rs", include_str!("../../autodiff/src/lib.rs")),
    ("autodiff/src/error.rs", include_str!("../../autodiff/src/error.rs")),
    ("autodiff/src/float.rs", include_str!("../../autodiff/src/float.rs")),
    ("autodiff/src/tensor.rs", include_str!("../../autodiff/src/tensor.rs")),
    ("autodiff/src/tape.rs", include_str!("../../autodiff/src/tape.rs")),
    ("autodiff/src/conv.rs", include_str!("../../autodiff/src/conv.rs")),
    ("autodiff/src/params.rs", include_str!("../../autodiff/src/params.rs")),
    ("autodiff/src/optim.rs", include_str!("../../autodiff/src/optim.rs")),
    ("core/src/lib.rs", include_str!("lib.rs")),
    ("core/src/error.rs", include_str!("error.rs")),
    ("core/src/schedule.rs", include_str!("schedule.rs")),
    ("core/src/models/mod.rs", include_str!("models/mod.rs")),
    ("core/src/models/mlp.rs", include_str!("models/mlp.rs")),
    ("core/src/models/unet.rs", include_str!("models/unet.rs")),
    ("core/src/models/checkpoint.rs", include_str!("models/checkpoint.rs")),
    ("core/src/objectives.rs", include_str!("objectives.rs")),
    ("core/src/sampler.rs", include_str!("sampler.rs")),
    ("core/src/oracles.rs", include_str!("oracles.rs")),
    ("core/src/metrics.rs", include_str!("metrics.rs")),
    ("core/src/datasets.rs", include_str!("datasets.rs")),
    ("core/src/config.rs", include_str!("config.rs")),
    ("core/src/train.rs", include_str!("train.rs")),
    ("core/src/run.rs", include_str!("run.rs")),
    ("core/src/figures.rs", include_str!("figures.rs")),
    ("core/src/ablation.rs", include_str!("ablation.rs")),
];

/// Content hash of the library sources this binary was built from.
pub fn code_hash() -> String {
    let mut all = Vec::new();
    for (name, text) in SOURCES {
        all.extend_from_slice(name.as_bytes());
        all.push(0);
        all.extend_from_slice(text.as_bytes());
        all.push(0);
    }
    hex_digest(&all)
}

/// Training and held-out reference sets for a config.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(FiniteDataset, FiniteDataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(streams::DATA);
    let data = match cfg.dataset.strip_prefix("dir:") {
        Some(path) => ingest_images(Path::new(path))?.0,
        None => generate_dataset(&cfg.dataset, &cfg.dataset_params, &mut rng)?,
    };
    let data = shuffled(&data, &mut rng)?;
    if cfg.holdout >= data.len() {
        return Err(LabError::config(format!("holdout {} leaves no training data out of {}", cfg.holdout, data.len())));
    }
    let (held, train) = data.split_at(cfg.holdout)?;
    Ok((train, held))
}

fn phase_options(cfg: &ExperimentConfig, name: &str, phase2: bool, dir: &Path) -> PhaseOptions {
    let p = if phase2 { &cfg.phase2 } else { &cfg.phase1 };
    PhaseOptions {
        ema_decay: cfg.ema_decay,
        cond_dropout: cfg.sp.cond_dropout_prob,
        unconditional: cfg.unconditional,
        log_every: cfg.log_every,
        checkpoint_every: cfg.checkpoint_every,
        dir: Some(dir.to_path_buf()),
        config_hash: Some(cfg.hash()),
        ..PhaseOptions::new(name, p.steps, p.batch)
    }
}

/// Final state of a phase: online and EMA checkpoints under `dir`.
fn save_phase(dir: &Path, name: &str, state: &TrainState) -> Result<[PathBuf; 2]> {
    let online = dir.join(format!("{name}_online.ckpt"));
    let ema = dir.join(format!("{name}_ema.ckpt"));
    save_checkpoint(&state.online, &online)?;
    save_checkpoint(&state.ema, &ema)?;
    Ok([online, ema])
}

fn eval_model(cfg: &ExperimentConfig, state: &TrainState) -> DenoiserModel {
    if cfg.eval_ema { state.ema.clone() } else { state.online.clone() }
}

/// Continues from a phase-1 checkpoint. Refuses to start without one, so the
/// self-perceptual phase can never run on an untrained network.
pub fn start_from_checkpoint(phase1: &Path, lr: f64, seed: u64, stream: u64) -> Result<TrainState> {
    if !phase1.exists() {
        return Err(LabError::config(format!("phase 2 needs a phase-1 checkpoint; {} does not exist", phase1.display())));
    }
    Ok(TrainState::new(load_checkpoint(phase1)?, lr, seed, stream))
}

/// Runs a self-perceptual phase from `init` against the frozen `perceptual`.
pub fn sp_phase(
    cfg: &ExperimentConfig,
    init: &Path,
    perceptual: &Path,
    name: &str,
    stream: u64,
    train: &FiniteDataset,
    schedule: &NoiseSchedule,
    dir: &Path,
) -> Result<TrainState> {
    let mut state = start_from_checkpoint(init, cfg.phase2.lr, cfg.seed, stream)?;
    let frozen = start_from_checkpoint(perceptual, cfg.phase2.lr, cfg.seed, stream)?.online.freeze_copy()?;
    let objective = Objective::SelfPerceptual { frozen: &frozen, config: &cfg.sp };
    train_phase(&mut state, train, &objective, schedule, &phase_options(cfg, name, true, dir))?;
    Ok(state)
}

/// Labels for evaluation samples: the reference set's labels, cycled.
pub fn eval_labels(cfg: &ExperimentConfig, reference: &FiniteDataset) -> Vec<Conditioning> {
    (0..cfg.eval_samples)
        .map(|i| if cfg.unconditional { Conditioning::NULL } else { reference.label(i % reference.len()) })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub model: String,
    pub sampler: SamplerConfig,
    pub nfe: usize,
    pub report: MetricReport,
}

/// Samples `model` under each sampler and compares with `reference`. All
/// models share the same initial noise per sampler (stream-seeded).
pub fn evaluate(
    cfg: &ExperimentConfig,
    name: &str,
    model: &DenoiserModel,
    reference: &FiniteDataset,
    schedule: &NoiseSchedule,
) -> Result<Vec<MetricRow>> {
    let labels = eval_labels(cfg, reference);
    let (real, _) = reference.as_batch()?;
    cfg.samplers
        .iter()
        .enumerate()
        .map(|(j, sc)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(streams::EVAL + j as u64);
            let traj = sample(model, &labels, sc, schedule, &mut rng)?;
            if !traj.sample.is_finite() {
                return Err(LabError::Numerical { step: 0, detail: format!("{name} produced non-finite samples") });
            }
            Ok(MetricRow { model: name.to_string(), sampler: sc.clone(), nfe: traj.nfe, report: MetricReport::compute(&traj.sample, &real)? })
        })
        .collect()
}

pub const METRICS_HEADER: &str = "run_id,config_hash,model,steps,cfg_scale,rescale_phi,nfe,energy_distance,mmd_rbf,nn_recall";

pub fn metrics_csv(cfg: &ExperimentConfig, rows: &[MetricRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            cfg.run_id(),
            cfg.hash(),
            r.model,
            r.sampler.steps,
            r.sampler.cfg_scale,
            r.sampler.rescale_phi,
            r.nfe,
            r.report.csv_fields()
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_hash: String,
    /// `(path relative to the run directory, sha256 of its bytes)`.
    pub outputs: Vec<(String, String)>,
    pub checkpoints: Vec<String>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut out = format!("config_hash = {}\ncode_hash = {}\n", self.config_hash, self.code_hash);
        for c in &self.checkpoints {
            let _ = writeln!(out, "checkpoint = {c}");
        }
        for (p, h) in &self.outputs {
            let _ = writeln!(out, "output = {p} {h}");
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub dir: PathBuf,
    pub metrics: Vec<MetricRow>,
    pub manifest: RunManifest,
}

impl RunResult {
    /// Metric row of `model` under the first sampler.
    pub fn report(&self, model: &str) -> Option<MetricReport> {
        self.metrics.iter().find(|r| r.model == model).map(|r| r.report)
    }
}

fn relative(dir: &Path, p: &Path) -> String {
    p.strip_prefix(dir).unwrap_or(p).display().to_string()
}

/// Runs the full two-phase protocol into `root/<run id>/`.
///
/// Evaluated models: `mse` (phase-1), `mse_baseline` (MSE continued for the
/// phase-2 budget, if enabled) and `sp` (self-perceptual fine-tune; with
/// `perceptual_source = sp` the fine-tune is repeated using the first SP
/// model as both start point and perceptual network).
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path) -> Result<RunResult> {
    cfg.validate()?;
    let dir = root.join(cfg.run_id());
    // Stale state files would make the phases resume instead of restarting.
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
    }
    std::fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
    let write = |name: &str, text: &str| -> Result<PathBuf> {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| LabError::io(&p, e))?;
        Ok(p)
    };
    let mut outputs = vec![write("config.txt", &cfg.to_file_text())?];
    let mut timing = format!("# config {}\n", cfg.hash());
    let schedule = cfg.schedule()?;
    let (train, held) = prepare_data(cfg)?;

    let clock = Instant::now();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(streams::INIT);
    let model = cfg.model.build::<f32, _>(&mut init_rng)?;
    let mut state = TrainState::new(model, cfg.phase1.lr, cfg.seed, streams::PHASE1);
    train_phase(&mut state, &train, &Objective::Mse, &schedule, &phase_options(cfg, "phase1", false, &dir))?;
    let [p1_online, p1_ema] = save_phase(&dir, "phase1", &state)?;
    let phase1_eval = eval_model(cfg, &state);
    let p1 = if cfg.eval_ema { p1_ema.clone() } else { p1_online.clone() };
    let _ = writeln!(timing, "phase1_ms = {}", clock.elapsed().as_millis());

    let clock = Instant::now();
    let sp_state = sp_phase(cfg, &p1, &p1, "phase2", streams::PHASE2, &train, &schedule, &dir)?;
    let [p2_online, p2_ema] = save_phase(&dir, "phase2", &sp_state)?;
    let mut checkpoints = vec![p1_online, p1_ema, p2_online, p2_ema];
    let sp_eval = if cfg.perceptual_source == PerceptualSource::Sp {
        let p2 = if cfg.eval_ema { checkpoints[3].clone() } else { checkpoints[2].clone() };
        let repeat = sp_phase(cfg, &p2, &p2, "phase2_repeat", streams::REPEAT, &train, &schedule, &dir)?;
        checkpoints.extend(save_phase(&dir, "phase2_repeat", &repeat)?);
        eval_model(cfg, &repeat)
    } else {
        eval_model(cfg, &sp_state)
    };
    let _ = writeln!(timing, "phase2_ms = {}", clock.elapsed().as_millis());

    let clock = Instant::now();
    let baseline = if cfg.mse_baseline {
        let mut b = start_from_checkpoint(&p1, cfg.phase2.lr, cfg.seed, streams::BASELINE)?;
        train_phase(&mut b, &train, &Objective::Mse, &schedule, &phase_options(cfg, "baseline", true, &dir))?;
        checkpoints.extend(save_phase(&dir, "baseline", &b)?);
        Some(eval_model(cfg, &b))
    } else {
        None
    };
    let _ = writeln!(timing, "baseline_ms = {}", clock.elapsed().as_millis());

    let clock = Instant::now();
    let mut models: Vec<(&str, &DenoiserModel)> = vec![("mse", &phase1_eval)];
    if let Some(b) = &baseline {
        models.push(("mse_baseline", b));
    }
    models.push(("sp", &sp_eval));
    let mut metrics = Vec::new();
    for (name, m) in &models {
        metrics.extend(evaluate(cfg, name, m, &held, &schedule)?);
    }
    outputs.push(write("metrics.csv", &metrics_csv(cfg, &metrics))?);
    let _ = writeln!(timing, "eval_ms = {}", clock.elapsed().as_millis());

    let fig_dir = dir.join("figures");
    std::fs::create_dir_all(&fig_dir).map_err(|e| LabError::io(&fig_dir, e))?;
    for (name, m) in &models {
        outputs.extend(emit_model_figures(&fig_dir, name, *m, &held, &schedule, &cfg.samplers[0], cfg.seed, &cfg.hash())?);
    }
    outputs.extend(emit_midpoint(&fig_dir, &held, &cfg.hash())?);
    write("timing.txt", &timing)?;

    let mut hashed = Vec::new();
    for p in outputs.iter().chain(&checkpoints) {
        let bytes = std::fs::read(p).map_err(|e| LabError::io(p, e))?;
        hashed.push((relative(&dir, p), hex_digest(&bytes)));
    }
    let manifest = RunManifest {
        config_hash: cfg.hash(),
        code_hash: code_hash(),
        outputs: hashed,
        checkpoints: checkpoints.iter().map(|p| relative(&dir, p)).collect(),
    };
    write("manifest.txt", &manifest.to_text())?;
    Ok(RunResult { dir, metrics, manifest })
}

/// Loads a run's evaluation model by name (`mse`, `mse_baseline`, `sp`).
pub fn load_run_model(dir: &Path, name: &str, ema: bool) -> Result<DenoiserModel> {
    let phase = match name {
        "mse" => "phase1",
        "mse_baseline" => "baseline",
        "sp" if dir.join("phase2_repeat_ema.ckpt").exists() => "phase2_repeat",
        "sp" => "phase2",
        other => return Err(LabError::config(format!("unknown run model `{other}`"))),
    };
    load_checkpoint(&dir.join(format!("{phase}_{}.ckpt", if ema { "ema" } else { "online" })))
}

/// Stacks sample rows read from a CSV file (numeric columns only; lines
/// starting with `#` and a non-numeric header are skipped).
pub fn read_points_csv(path: &Path, dim: Option<usize>) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let mut data = Vec::new();
    let mut width = dim;
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let vals: std::result::Result<Vec<f32>, _> = line.split(',').map(|v| v.trim().parse::<f32>()).collect();
        let Ok(mut vals) = vals else { continue };
        if let Some(d) = dim {
            vals.truncate(d);
        }
        match width {
            None => width = Some(vals.len()),
            Some(w) if w != vals.len() => {
                return Err(LabError::Format { path: path.display().to_string(), detail: "rows differ in length".into() })
            }
            _ => {}
        }
        data.extend(vals);
    }
    let w = width.filter(|&w| w > 0).ok_or_else(|| LabError::Format { path: path.display().to_string(), detail: "no numeric rows".into() })?;
    Ok(Tensor::new([data.len() / w, w], data)?)
}
