//! Experiment configuration: a flat `key = value` text format with a stable
//! content hash.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::datasets::{DatasetParams, BUILTIN_DATASETS};
use crate::error::{LabError, Result};
use crate::models::{FeatureTap, MlpConfig, ModelConfig, UnetConfig};
use crate::objectives::{FeatureDistance, SpConfig, TPrimeSampler};
use crate::sampler::SamplerConfig;
use crate::schedule::{NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};

/// Where the perceptual (frozen) network of the SP phase comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerceptualSource {
    /// The MSE-trained phase-1 model.
    Mse,
    /// A model that was itself SP-fine-tuned (self-perceptual repeated).
    Sp,
}

impl PerceptualSource {
    pub fn name(self) -> &'static str {
        match self {
            PerceptualSource::Mse => "mse",
            PerceptualSource::Sp => "sp",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PerceptualSource::Mse => "MSE model as perceptual network",
            PerceptualSource::Sp => "SP model as perceptual network",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(PerceptualSource::Mse),
            "sp" => Ok(PerceptualSource::Sp),
            _ => Err(LabError::config(format!("unknown perceptual source `{s}`"))),
        }
    }
}

/// Optimisation settings of one training phase.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSettings {
    pub steps: u64,
    pub lr: f64,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Built-in generator name, or `dir:<path>` for a PGM image directory.
    pub dataset: String,
    pub dataset_params: DatasetParams,
    /// Points held out as the evaluation reference set.
    pub holdout: usize,
    pub model: ModelConfig,
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub phase1: PhaseSettings,
    pub phase2: PhaseSettings,
    pub sp: SpConfig,
    pub perceptual_source: PerceptualSource,
    /// Train and sample with the null label only.
    pub unconditional: bool,
    pub samplers: Vec<SamplerConfig>,
    pub ema_decay: f64,
    /// Evaluate EMA weights (otherwise the online weights).
    pub eval_ema: bool,
    pub eval_samples: usize,
    /// Also continue MSE training for the phase-2 budget as a matched baseline.
    pub mse_baseline: bool,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: "gauss_mixture_8".into(),
            dataset_params: DatasetParams::default(),
            holdout: 2048,
            model: ModelConfig::Mlp2d(MlpConfig::default()),
            schedule_steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            // Full-scale protocol: lr 3e-5, batch 896, EMA 0.9995, 60k + 50k steps.
            phase1: PhaseSettings { steps: 5000, lr: 3e-4, batch: 256 },
            phase2: PhaseSettings { steps: 5000, lr: 3e-4, batch: 256 },
            sp: SpConfig::default(),
            perceptual_source: PerceptualSource::Mse,
            unconditional: false,
            samplers: vec![SamplerConfig::default()],
            ema_decay: 0.999,
            eval_ema: true,
            eval_samples: 2048,
            mse_baseline: true,
            log_every: 50,
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

fn parse_num<F: std::str::FromStr>(key: &str, v: &str) -> Result<F> {
    v.parse().map_err(|_| LabError::config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(LabError::config(format!("`{key}`: expected true/false, got `{v}`"))),
    }
}

fn sampler_to_string(s: &SamplerConfig) -> String {
    format!("{}:{}:{}", s.steps, s.cfg_scale, s.rescale_phi)
}

fn parse_samplers(v: &str) -> Result<Vec<SamplerConfig>> {
    v.split(',')
        .map(|item| {
            let parts: Vec<&str> = item.trim().split(':').collect();
            if parts.len() != 3 {
                return Err(LabError::config(format!("sampler `{item}` must be steps:cfg_scale:rescale_phi")));
            }
            Ok(SamplerConfig {
                steps: parse_num("samplers", parts[0])?,
                cfg_scale: parse_num("samplers", parts[1])?,
                rescale_phi: parse_num("samplers", parts[2])?,
                record_trajectory: false,
            })
        })
        .collect()
}

impl ExperimentConfig {
    /// Toy-scale defaults for a dataset: the U-Net for images, the MLP otherwise.
    pub fn for_dataset(name: &str) -> Self {
        let mut cfg = Self { dataset: name.to_string(), ..Self::default() };
        if name == "shapes16" || name.starts_with("dir:") {
            cfg.model = ModelConfig::TinyUnet(UnetConfig::default());
            cfg.phase1.lr = 1e-4;
            cfg.phase2.lr = 1e-4;
        }
        cfg
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::zero_terminal_snr(self.schedule_steps, self.beta_start, self.beta_end)
    }

    /// Canonical key/value listing; the hash and the file format use it.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut p = vec![
            ("dataset", self.dataset.clone()),
            ("dataset_n", self.dataset_params.n.to_string()),
            ("dataset_radius", self.dataset_params.radius.to_string()),
            ("dataset_noise", self.dataset_params.noise.to_string()),
            ("holdout", self.holdout.to_string()),
            ("model", self.model.kind_name().to_string()),
        ];
        match &self.model {
            ModelConfig::Mlp2d(m) => {
                p.push(("mlp_hidden", m.hidden.to_string()));
                p.push(("time_dim", m.time_dim.to_string()));
                p.push(("class_dim", m.class_dim.to_string()));
            }
            ModelConfig::TinyUnet(u) => {
                p.push(("unet_channels", u.channels.map(|c| c.to_string()).join(",")));
                p.push(("time_dim", u.time_dim.to_string()));
            }
        }
        p.extend([
            ("schedule_steps", self.schedule_steps.to_string()),
            ("beta_start", self.beta_start.to_string()),
            ("beta_end", self.beta_end.to_string()),
            ("phase1_steps", self.phase1.steps.to_string()),
            ("phase1_lr", self.phase1.lr.to_string()),
            ("phase1_batch", self.phase1.batch.to_string()),
            ("phase2_steps", self.phase2.steps.to_string()),
            ("phase2_lr", self.phase2.lr.to_string()),
            ("phase2_batch", self.phase2.batch.to_string()),
            ("sp_tap", self.sp.tap.name().to_string()),
            ("sp_tprime", self.sp.tprime.name()),
            ("sp_distance", self.sp.distance.name().to_string()),
            ("cond_dropout", self.sp.cond_dropout_prob.to_string()),
            ("perceptual_source", self.perceptual_source.name().to_string()),
            ("unconditional", self.unconditional.to_string()),
            ("samplers", self.samplers.iter().map(sampler_to_string).collect::<Vec<_>>().join(",")),
            ("ema_decay", self.ema_decay.to_string()),
            ("eval_ema", self.eval_ema.to_string()),
            ("eval_samples", self.eval_samples.to_string()),
            ("mse_baseline", self.mse_baseline.to_string()),
            ("log_every", self.log_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("seed", self.seed.to_string()),
        ]);
        p
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// [`ExperimentConfig::to_text`] under a `# config <hash>` comment line;
    /// parses back to the same config.
    pub fn to_file_text(&self) -> String {
        format!("# config {}\n{}", self.hash(), self.to_text())
    }

    /// SHA-256 of the canonical listing, hex encoded.
    pub fn hash(&self) -> String {
        hex_digest(self.to_text().as_bytes())
    }

    /// Short prefix of [`ExperimentConfig::hash`] used for run directory names.
    pub fn run_id(&self) -> String {
        self.hash()[..16].to_string()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "dataset" => {
                if !BUILTIN_DATASETS.contains(&v) && !v.starts_with("dir:") {
                    return Err(LabError::config(format!("unknown dataset `{v}`")));
                }
                let switch_model = (v == "shapes16" || v.starts_with("dir:")) != matches!(self.model, ModelConfig::TinyUnet(_));
                self.dataset = v.to_string();
                if switch_model {
                    let fresh = Self::for_dataset(v);
                    self.model = fresh.model;
                    self.phase1.lr = fresh.phase1.lr;
                    self.phase2.lr = fresh.phase2.lr;
                }
            }
            "dataset_n" => self.dataset_params.n = parse_num(key, v)?,
            "dataset_radius" => self.dataset_params.radius = parse_num(key, v)?,
            "dataset_noise" => self.dataset_params.noise = parse_num(key, v)?,
            "holdout" => self.holdout = parse_num(key, v)?,
            "model" => {
                self.model = match v {
                    "mlp2d" => ModelConfig::Mlp2d(MlpConfig::default()),
                    "tiny_unet" => ModelConfig::TinyUnet(UnetConfig::default()),
                    _ => return Err(LabError::config(format!("unknown model `{v}`"))),
                }
            }
            "mlp_hidden" => match &mut self.model {
                ModelConfig::Mlp2d(m) => m.hidden = parse_num(key, v)?,
                _ => return Err(LabError::config("`mlp_hidden` needs model = mlp2d")),
            },
            "class_dim" => match &mut self.model {
                ModelConfig::Mlp2d(m) => m.class_dim = parse_num(key, v)?,
                _ => return Err(LabError::config("`class_dim` needs model = mlp2d")),
            },
            "unet_channels" => match &mut self.model {
                ModelConfig::TinyUnet(u) => {
                    let c: Vec<usize> = v.split(',').map(|x| parse_num(key, x.trim())).collect::<Result<_>>()?;
                    u.channels = c.try_into().map_err(|_| LabError::config("`unet_channels` needs three widths"))?;
                }
                _ => return Err(LabError::config("`unet_channels` needs model = tiny_unet")),
            },
            "time_dim" => match &mut self.model {
                ModelConfig::Mlp2d(m) => m.time_dim = parse_num(key, v)?,
                ModelConfig::TinyUnet(u) => u.time_dim = parse_num(key, v)?,
            },
            "schedule_steps" => self.schedule_steps = parse_num(key, v)?,
            "beta_start" => self.beta_start = parse_num(key, v)?,
            "beta_end" => self.beta_end = parse_num(key, v)?,
            "phase1_steps" => self.phase1.steps = parse_num(key, v)?,
            "phase1_lr" => self.phase1.lr = parse_num(key, v)?,
            "phase1_batch" => self.phase1.batch = parse_num(key, v)?,
            "phase2_steps" => self.phase2.steps = parse_num(key, v)?,
            "phase2_lr" => self.phase2.lr = parse_num(key, v)?,
            "phase2_batch" => self.phase2.batch = parse_num(key, v)?,
            "sp_tap" => self.sp.tap = FeatureTap::parse(v)?,
            "sp_tprime" => self.sp.tprime = TPrimeSampler::parse(v)?,
            "sp_distance" => self.sp.distance = FeatureDistance::parse(v)?,
            "cond_dropout" => self.sp.cond_dropout_prob = parse_num(key, v)?,
            "perceptual_source" => self.perceptual_source = PerceptualSource::parse(v)?,
            "unconditional" => self.unconditional = parse_bool(key, v)?,
            "samplers" => self.samplers = parse_samplers(v)?,
            "ema_decay" => self.ema_decay = parse_num(key, v)?,
            "eval_ema" => self.eval_ema = parse_bool(key, v)?,
            "eval_samples" => self.eval_samples = parse_num(key, v)?,
            "mse_baseline" => self.mse_baseline = parse_bool(key, v)?,
            "log_every" => self.log_every = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            other => return Err(LabError::config(format!("unknown config key `{other}`"))),
        }
        self.sync_timesteps();
        Ok(())
    }

    /// Parses the flat text format: one `key = value` per line, `#` comments.
    /// A `dataset` line, if present, is applied first so that model defaults
    /// follow the data.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LabError::config(format!("line {}: expected `key = value`", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let seen: BTreeMap<&str, usize> = pairs.iter().enumerate().map(|(i, (k, _))| (k.as_str(), i)).collect();
        if seen.len() != pairs.len() {
            return Err(LabError::config("duplicate config key"));
        }
        let mut cfg = match seen.get("dataset") {
            Some(&i) => Self::for_dataset(&pairs[i].1),
            None => Self::default(),
        };
        let model_first = seen.get("model").map(|&i| pairs[i].clone());
        for (k, v) in model_first.iter().chain(pairs.iter().filter(|(k, _)| k != "model")) {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::config(m));
        if self.phase1.batch == 0 || self.phase2.batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.phase1.lr > 0.0 && self.phase2.lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay {} outside [0, 1)", self.ema_decay));
        }
        if self.samplers.is_empty() {
            return bad("at least one sampler is required".into());
        }
        for s in &self.samplers {
            s.validate(self.schedule_steps)?;
        }
        if self.eval_samples < 4 || self.holdout < 4 {
            return bad("eval_samples and holdout must be at least 4".into());
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return bad("log_every and checkpoint_every must be positive".into());
        }
        let timesteps = match &self.model {
            ModelConfig::Mlp2d(m) => m.timesteps,
            ModelConfig::TinyUnet(u) => u.timesteps,
        };
        if timesteps != self.schedule_steps {
            return bad(format!("model timesteps {timesteps} differ from schedule_steps {}", self.schedule_steps));
        }
        self.sp.validate()?;
        self.schedule()?;
        Ok(())
    }

    /// Keeps the model's time normalisation in step with the schedule.
    pub fn sync_timesteps(&mut self) {
        match &mut self.model {
            ModelConfig::Mlp2d(m) => m.timesteps = self.schedule_steps,
            ModelConfig::TinyUnet(u) => u.timesteps = self.schedule_steps,
        }
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
