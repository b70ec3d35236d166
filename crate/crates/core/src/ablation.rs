//! Ablation sweeps over the self-perceptual hyperparameters and guidance
//! scale. Each sweep trains the MSE phase once and varies only what follows.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, PerceptualSource};
use crate::error::{LabError, Result};
use crate::metrics::MetricReport;
use crate::models::{save_checkpoint, FeatureTap};
use crate::objectives::{FeatureDistance, TPrimeSampler};
use crate::run::{evaluate, prepare_data, sp_phase, streams};
use crate::sampler::SamplerConfig;
use crate::train::{train_phase, Objective, PhaseOptions, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Tap,
    TPrime,
    Distance,
    PerceptualSource,
    CfgScale,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] =
        [AblationAxis::Tap, AblationAxis::TPrime, AblationAxis::Distance, AblationAxis::PerceptualSource, AblationAxis::CfgScale];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Tap => "tap",
            AblationAxis::TPrime => "tprime_sampler",
            AblationAxis::Distance => "feature_distance",
            AblationAxis::PerceptualSource => "perceptual_source",
            AblationAxis::CfgScale => "cfg_scale",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s || (s == "tprime" && *a == AblationAxis::TPrime) || (s == "distance" && *a == AblationAxis::Distance))
            .ok_or_else(|| LabError::config(format!("unknown ablation axis `{s}`")))
    }

    /// Column title of the row labels.
    pub fn column(self) -> &'static str {
        match self {
            AblationAxis::Tap => "Layer",
            AblationAxis::TPrime => "Timestep (t' clamped to [1, T])",
            AblationAxis::Distance => "Distance",
            AblationAxis::PerceptualSource => "Formulation",
            AblationAxis::CfgScale => "Loss,CFG,Rescale",
        }
    }

    /// The swept values, in table order.
    pub fn default_values(self) -> Vec<String> {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        match self {
            AblationAxis::Tap => FeatureTap::ALL.iter().map(|t| t.name().to_string()).collect(),
            AblationAxis::TPrime => s(&["delta40", "gauss100", "uniform"]),
            AblationAxis::Distance => s(&["mae", "mse"]),
            AblationAxis::PerceptualSource => s(&["mse", "sp"]),
            AblationAxis::CfgScale => s(&["1", "2", "3", "4", "7.5"]),
        }
    }
}

/// Guidance rescale used with every guided sampler of the sweep.
pub const SWEEP_RESCALE: f64 = 0.7;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub value: String,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("# config {}\n{},value,energy_distance,mmd_rbf,nn_recall\n", self.config_hash, self.axis.column());
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.label, r.value, r.report.csv_fields());
        }
        out
    }
}

fn row_label(axis: AblationAxis, value: &str) -> Result<String> {
    Ok(match axis {
        AblationAxis::Tap => FeatureTap::parse(value)?.label().to_string(),
        AblationAxis::TPrime => TPrimeSampler::parse(value)?.label(),
        AblationAxis::Distance => FeatureDistance::parse(value)?.label().to_string(),
        AblationAxis::PerceptualSource => PerceptualSource::parse(value)?.label().to_string(),
        AblationAxis::CfgScale => {
            let w: f64 = value.parse().map_err(|_| LabError::config(format!("bad cfg scale `{value}`")))?;
            if w == 1.0 { "SP,,".to_string() } else { format!("SP,{w},{SWEEP_RESCALE}") }
        }
    })
}

fn guided(w: f64) -> SamplerConfig {
    let phi = if w == 1.0 { 0.0 } else { SWEEP_RESCALE };
    SamplerConfig { steps: 25, cfg_scale: w, rescale_phi: phi, record_trajectory: false }
}

/// Runs one sweep into `root/ablation_<axis>_<run id>/` and writes
/// `ablation_<axis>.csv` there. `values` defaults to the table rows.
pub fn run_ablation(axis: AblationAxis, values: Option<&[String]>, base: &ExperimentConfig, root: &Path) -> Result<(AblationTable, PathBuf)> {
    base.validate()?;
    let values: Vec<String> = values.map_or_else(|| axis.default_values(), <[String]>::to_vec);
    if values.is_empty() {
        return Err(LabError::config("ablation needs at least one value"));
    }
    let labels = values.iter().map(|v| row_label(axis, v)).collect::<Result<Vec<_>>>()?;
    let dir = root.join(format!("ablation_{}_{}", axis.name(), base.run_id()));
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
    }
    std::fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
    std::fs::write(dir.join("config.txt"), base.to_file_text()).map_err(|e| LabError::io(dir.join("config.txt"), e))?;

    let schedule = base.schedule()?;
    let (train, held) = prepare_data(base)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(base.seed);
    init_rng.set_stream(streams::INIT);
    let mut state = TrainState::new(base.model.build::<f32, _>(&mut init_rng)?, base.phase1.lr, base.seed, streams::PHASE1);
    let opts = PhaseOptions {
        ema_decay: base.ema_decay,
        cond_dropout: base.sp.cond_dropout_prob,
        unconditional: base.unconditional,
        log_every: base.log_every,
        checkpoint_every: base.checkpoint_every,
        dir: Some(dir.clone()),
        config_hash: Some(base.hash()),
        ..PhaseOptions::new("phase1", base.phase1.steps, base.phase1.batch)
    };
    train_phase(&mut state, &train, &Objective::Mse, &schedule, &opts)?;
    let p1 = dir.join("phase1.ckpt");
    save_checkpoint(if base.eval_ema { &state.ema } else { &state.online }, &p1)?;

    let pick = |s: &TrainState| if base.eval_ema { s.ema.clone() } else { s.online.clone() };
    let mut rows = Vec::new();
    match axis {
        AblationAxis::CfgScale => {
            let scales = values.iter().map(|v| v.parse::<f64>().map_err(|_| LabError::config(format!("bad cfg scale `{v}`")))).collect::<Result<Vec<_>>>()?;
            let cfg = ExperimentConfig { samplers: scales.iter().map(|&w| guided(w)).collect(), ..base.clone() };
            let sp = pick(&sp_phase(&cfg, &p1, &p1, "sp", streams::PHASE2, &train, &schedule, &dir)?);
            // Reference row: the MSE model with the strongest guidance.
            let reference = ExperimentConfig { samplers: vec![guided(7.5)], ..base.clone() };
            let mse_row = evaluate(&reference, "mse", &pick(&state), &held, &schedule)?.remove(0);
            rows.push(AblationRow { label: format!("MSE,7.5,{SWEEP_RESCALE}"), value: "mse".into(), report: mse_row.report });
            for ((row, label), value) in evaluate(&cfg, "sp", &sp, &held, &schedule)?.into_iter().zip(labels).zip(&values) {
                rows.push(AblationRow { label, value: value.clone(), report: row.report });
            }
        }
        _ => {
            let mut first_sp: Option<PathBuf> = None;
            for (i, (value, label)) in values.iter().zip(labels).enumerate() {
                let mut cfg = base.clone();
                let name = format!("sp_{i}");
                let model = match axis {
                    AblationAxis::PerceptualSource if PerceptualSource::parse(value)? == PerceptualSource::Sp => {
                        // Repeat the fine-tune with an SP model as start and perceptual network.
                        let src = match &first_sp {
                            Some(p) => p.clone(),
                            None => {
                                let s = sp_phase(&cfg, &p1, &p1, "sp_source", streams::PHASE2, &train, &schedule, &dir)?;
                                let p = dir.join("sp_source.ckpt");
                                save_checkpoint(if base.eval_ema { &s.ema } else { &s.online }, &p)?;
                                p
                            }
                        };
                        pick(&sp_phase(&cfg, &src, &src, &name, streams::REPEAT, &train, &schedule, &dir)?)
                    }
                    _ => {
                        let key = match axis {
                            AblationAxis::Tap => "sp_tap",
                            AblationAxis::TPrime => "sp_tprime",
                            AblationAxis::Distance => "sp_distance",
                            _ => "perceptual_source",
                        };
                        cfg.set(key, value)?;
                        let s = sp_phase(&cfg, &p1, &p1, &name, streams::PHASE2, &train, &schedule, &dir)?;
                        let p = dir.join(format!("{name}.ckpt"));
                        save_checkpoint(if base.eval_ema { &s.ema } else { &s.online }, &p)?;
                        if axis == AblationAxis::PerceptualSource {
                            first_sp = Some(p);
                        }
                        pick(&s)
                    }
                };
                let row = evaluate(&cfg, &name, &model, &held, &schedule)?.remove(0);
                rows.push(AblationRow { label, value: value.clone(), report: row.report });
            }
        }
    }
    let table = AblationTable { axis, config_hash: base.hash(), rows };
    let path = dir.join(format!("ablation_{}.csv", axis.name()));
    std::fs::write(&path, table.to_csv()).map_err(|e| LabError::io(&path, e))?;
    Ok((table, path))
}
