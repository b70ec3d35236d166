use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use difflab::ablation::{run_ablation, AblationAxis};
use difflab::checks::oracle_checks;
use difflab::config::ExperimentConfig;
use difflab::datasets::encode_pgm;
use difflab::figures::{strip_csv, tile_images};
use difflab::metrics::MetricReport;
use difflab::models::{load_checkpoint, Conditioning, Denoiser};
use difflab::run::{read_points_csv, run_experiment};
use difflab::sampler::{sample, SamplerConfig};
use difflab::schedule::{NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use difflab::{LabError, Result};

#[derive(Parser)]
#[command(name = "difflab", about = "Diffusion training lab: MSE and self-perceptual objectives on toy data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run both training phases, evaluate, and write figures.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config entry, `key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Class label; omitted means the null label.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, default_value_t = 25)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        cfg_scale: f64,
        #[arg(long, default_value_t = 0.0)]
        rescale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the per-step x̂0 trajectory next to the output.
        #[arg(long)]
        trajectory: bool,
        /// Output file: `.csv` (one sample per row) or `.pgm` (image grid).
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one ablation axis.
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Comma-separated values; defaults to the full table.
        #[arg(long)]
        values: Option<String>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Verify the analytic oracles and sampler identities.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Distances between two CSV sample sets.
    Metrics {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Use only the first `dim` columns of each row.
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Print the noise schedule as CSV.
    DumpSchedule {
        #[arg(long, default_value_t = DEFAULT_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = DEFAULT_BETA_START)]
        beta_start: f64,
        #[arg(long, default_value_t = DEFAULT_BETA_END)]
        beta_end: f64,
    },
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    // A dataset override first, so model defaults follow it.
    let split = |o: &String| o.split_once('=').map(|(k, v)| (k.trim().to_string(), v.trim().to_string()));
    let pairs = overrides.iter().map(|o| split(o).ok_or_else(|| LabError::config(format!("override `{o}` is not key=value")))).collect::<Result<Vec<_>>>()?;
    for (k, v) in pairs.iter().filter(|(k, _)| k == "dataset").chain(pairs.iter().filter(|(k, _)| k != "dataset")) {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, overrides, out } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let result = run_experiment(&cfg, &out)?;
            println!("run {} -> {}", cfg.run_id(), result.dir.display());
            for row in &result.metrics {
                println!(
                    "{:<13} steps={} cfg={} rescale={} nfe={}  energy={:.5} mmd={:.5} recall={:.3}",
                    row.model,
                    row.sampler.steps,
                    row.sampler.cfg_scale,
                    row.sampler.rescale_phi,
                    row.nfe,
                    row.report.energy_distance,
                    row.report.mmd_rbf,
                    row.report.nearest_neighbor_recall
                );
            }
        }
        Command::Sample { checkpoint, n, class, steps, cfg_scale, rescale, seed, trajectory, out } => {
            let model = load_checkpoint(&checkpoint)?;
            let schedule = NoiseSchedule::zero_terminal_snr(model.timesteps(), DEFAULT_BETA_START, DEFAULT_BETA_END)?;
            let cfg = SamplerConfig { steps, cfg_scale, rescale_phi: rescale, record_trajectory: trajectory };
            let labels = vec![class.map_or(Conditioning::NULL, Conditioning::class); n];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let traj = sample(&model, &labels, &cfg, &schedule, &mut rng)?;
            let shape = model.sample_shape().to_vec();
            if out.extension().is_some_and(|e| e == "pgm") {
                if shape.len() != 3 || shape[0] != 1 {
                    return Err(LabError::config("PGM output needs a single-channel image model"));
                }
                let imgs: Vec<&[f32]> = traj.sample.data().chunks(shape[1] * shape[2]).collect();
                let (w, h, grid) = tile_images(&imgs, shape[1], shape[2], (n as f64).sqrt().ceil() as usize);
                write_file(&out, &encode_pgm(w, h, &grid))?;
            } else {
                let d = traj.sample.numel() / n.max(1);
                let text: String = traj
                    .sample
                    .data()
                    .chunks(d.max(1))
                    .map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",") + "\n")
                    .collect();
                write_file(&out, text.as_bytes())?;
            }
            if trajectory {
                write_file(&out.with_extension("trajectory.csv"), strip_csv(&traj, "none").as_bytes())?;
            }
            println!("wrote {n} samples ({} NFE each) to {}", traj.nfe, out.display());
        }
        Command::Ablate { axis, config, overrides, values, out } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let axis = AblationAxis::parse(&axis)?;
            let values: Option<Vec<String>> = values.map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
            let (table, path) = run_ablation(axis, values.as_deref(), &cfg, &out)?;
            print!("{}", table.to_csv());
            println!("wrote {}", path.display());
        }
        Command::OracleCheck { seed } => {
            let outcomes = oracle_checks(seed)?;
            let mut failed = 0;
            for o in &outcomes {
                println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
                failed += usize::from(!o.passed);
            }
            if failed > 0 {
                return Err(LabError::Numerical { step: 0, detail: format!("{failed} oracle check(s) failed") });
            }
        }
        Command::Metrics { generated, reference, dim } => {
            let g = read_points_csv(&generated, dim)?;
            let r = read_points_csv(&reference, dim)?;
            let report = MetricReport::compute(&g, &r)?;
            println!("{}", MetricReport::CSV_HEADER);
            println!("{}", report.csv_fields());
        }
        Command::DumpSchedule { steps, beta_start, beta_end } => {
            print!("{}", NoiseSchedule::zero_terminal_snr(steps, beta_start, beta_end)?.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
