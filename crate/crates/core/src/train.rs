//! Training loop shared by both phases, with EMA weights, periodic
//! resumable state files and a CSV log.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use difflab_autodiff::{ema_update, Adam};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{LabError, Result};
use crate::models::checkpoint::{decode_header, decode_store_into, encode_header, encode_store, put_u32, Reader};
use crate::models::{Conditioning, Denoiser, DenoiserModel};
use crate::objectives::{apply_cond_dropout, mse_loss, sp_loss, SpConfig};
use crate::oracles::FiniteDataset;
use crate::schedule::NoiseSchedule;

pub const STATE_MAGIC: &[u8; 4] = b"DLTS";
pub const STATE_VERSION: u32 = 1;
pub const LOG_HEADER: &str = "step,loss,lr,wall_ms,t_mean,tprime_mean";

pub enum Objective<'a> {
    Mse,
    SelfPerceptual { frozen: &'a DenoiserModel, config: &'a SpConfig },
}

impl Objective<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Mse => "mse",
            Objective::SelfPerceptual { .. } => "sp",
        }
    }
}

#[derive(Clone, Debug)]
pub struct PhaseOptions {
    /// Total step count of the phase (a resumed state continues towards it).
    pub steps: u64,
    pub batch: usize,
    pub ema_decay: f64,
    pub cond_dropout: f64,
    /// Replace every label by the null token.
    pub unconditional: bool,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Receives `<name>.state` and `<name>_log.csv` when set.
    pub dir: Option<PathBuf>,
    pub name: String,
    /// Stop early after this step, as if interrupted.
    pub stop_after: Option<u64>,
    /// Written as a `# config <hash>` line at the top of a fresh log.
    pub config_hash: Option<String>,
}

impl PhaseOptions {
    pub fn new(name: &str, steps: u64, batch: usize) -> Self {
        Self {
            steps,
            batch,
            ema_decay: 0.999,
            cond_dropout: 0.1,
            unconditional: false,
            log_every: 50,
            checkpoint_every: 1000,
            dir: None,
            name: name.to_string(),
            stop_after: None,
            config_hash: None,
        }
    }

    pub fn state_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{}.state", self.name)))
    }

    pub fn log_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{}_log.csv", self.name)))
    }
}

/// Everything needed to continue a phase bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub online: DenoiserModel,
    pub ema: DenoiserModel,
    pub adam: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn read_u64(r: &mut Reader<'_>) -> Result<u64> {
    Ok(u64::from_le_bytes(r.bytes(8)?.try_into().expect("8 bytes")))
}

fn read_f64(r: &mut Reader<'_>) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

fn state_err(detail: impl Into<String>) -> LabError {
    LabError::Format { path: "<train state>".into(), detail: detail.into() }
}

impl TrainState {
    /// Fresh optimiser and EMA for `model`; the rng is `seed` on `stream`.
    pub fn new(model: DenoiserModel, lr: f64, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { ema: model.clone(), online: model, adam: Adam::new(lr), step: 0, rng }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        put_u32(&mut out, STATE_VERSION);
        encode_header(&mut out, &self.online.config());
        encode_store(&mut out, self.online.params());
        encode_store(&mut out, self.ema.params());
        put_u64(&mut out, self.step);
        put_u64(&mut out, self.adam.lr.to_bits());
        put_u64(&mut out, self.adam.steps_taken());
        let (m, v) = self.adam.moments();
        put_u32(&mut out, m.len() as u32);
        for (mi, vi) in m.iter().zip(v) {
            put_u32(&mut out, mi.len() as u32);
            for x in mi.iter().chain(vi) {
                put_u64(&mut out, x.to_bits());
            }
        }
        out.extend_from_slice(&self.rng.get_seed());
        put_u64(&mut out, self.rng.get_stream());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.bytes(4)? != STATE_MAGIC {
            return Err(state_err("bad magic"));
        }
        let version = r.u32()?;
        if version != STATE_VERSION {
            return Err(state_err(format!("unsupported version {version}")));
        }
        let config = decode_header(&mut r)?;
        let mut init = ChaCha8Rng::seed_from_u64(0);
        let mut online = config.build::<f32, _>(&mut init)?;
        decode_store_into(&mut r, &mut online)?;
        let mut ema = online.clone();
        decode_store_into(&mut r, &mut ema)?;
        let step = read_u64(&mut r)?;
        let lr = read_f64(&mut r)?;
        let adam_step = read_u64(&mut r)?;
        let n = r.u32()? as usize;
        if n > online.params().len() {
            return Err(state_err("optimizer state larger than the model"));
        }
        let mut first = Vec::with_capacity(n);
        let mut second = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let mut vals = (0..2 * len).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            second.push(vals.split_off(len));
            first.push(vals);
        }
        let adam = Adam::restore(lr, adam_step, first, second)?;
        let seed: [u8; 32] = r.bytes(32)?.try_into().expect("32 bytes");
        let stream = read_u64(&mut r)?;
        let word_pos = u128::from_le_bytes(r.bytes(16)?.try_into().expect("16 bytes"));
        if !r.finished() {
            return Err(state_err("trailing bytes"));
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        Ok(Self { online, ema, adam, step, rng })
    }

    /// Writes via a temporary file so an interrupted save never clobbers the
    /// previous good state.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("state.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| LabError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            LabError::Format { detail, .. } => LabError::Format { path: path.display().to_string(), detail },
            other => other,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhaseReport {
    /// Loss of every step run by this call.
    pub losses: Vec<f64>,
    pub final_step: u64,
}

/// Draws one training batch: uniform indices, then label dropout.
pub fn draw_batch<R: Rng + ?Sized>(
    data: &FiniteDataset,
    batch: usize,
    cond_dropout: f64,
    unconditional: bool,
    rng: &mut R,
) -> Result<(difflab_autodiff::Tensor, Vec<Conditioning>)> {
    let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..data.len())).collect();
    let (x, c) = data.batch(&idx)?;
    let c = c
        .into_iter()
        .map(|ci| if unconditional { Conditioning::NULL } else { apply_cond_dropout(ci, cond_dropout, rng) })
        .collect();
    Ok((x, c))
}

/// Runs `state` forward to `opts.steps`. A non-finite loss or gradient aborts
/// with [`LabError::Numerical`]; the last periodic state file is kept.
pub fn train_phase(
    state: &mut TrainState,
    data: &FiniteDataset,
    objective: &Objective<'_>,
    schedule: &NoiseSchedule,
    opts: &PhaseOptions,
) -> Result<PhaseReport> {
    if opts.batch == 0 {
        return Err(LabError::config("batch size must be positive"));
    }
    if let Objective::SelfPerceptual { frozen, config } = objective {
        if !frozen.is_frozen() {
            return Err(LabError::contract("perceptual network must be frozen"));
        }
        config.validate()?;
    }
    let mut log = match opts.log_path() {
        Some(path) => {
            let fresh = !path.exists();
            let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| LabError::io(&path, e))?;
            if fresh {
                if let Some(hash) = &opts.config_hash {
                    writeln!(f, "# config {hash}").map_err(|e| LabError::io(&path, e))?;
                }
                writeln!(f, "{LOG_HEADER}").map_err(|e| LabError::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };
    let started = Instant::now();
    let mut report = PhaseReport { losses: Vec::new(), final_step: state.step };
    while state.step < opts.steps {
        let step = state.step + 1;
        let numerical = |e: LabError| match e {
            LabError::Numerical { detail, .. } => LabError::Numerical { step, detail },
            LabError::Tensor(t @ difflab_autodiff::TensorError::NonFiniteGradient { .. }) => {
                LabError::Numerical { step, detail: t.to_string() }
            }
            other => other,
        };
        let (x, c) = draw_batch(data, opts.batch, opts.cond_dropout, opts.unconditional, &mut state.rng)?;
        state.online.params_mut().zero_grad();
        let result = match objective {
            Objective::Mse => mse_loss(&mut state.online, &x, &c, &mut state.rng, schedule),
            Objective::SelfPerceptual { frozen, config } => sp_loss(&mut state.online, frozen, &x, &c, &mut state.rng, schedule, config),
        }
        .map_err(numerical)?;
        state.adam.step(state.online.params_mut()).map_err(|e| numerical(e.into()))?;
        state.online.params_mut().zero_grad();
        ema_update(state.ema.params_mut(), state.online.params(), opts.ema_decay)?;
        state.step = step;
        report.losses.push(result.loss);
        report.final_step = step;

        if let Some((f, path)) = log.as_mut() {
            if step == 1 || step % opts.log_every == 0 || step == opts.steps {
                let aux = |k: &str| result.aux.get(k).map_or(String::new(), |v| format!("{v:.3}"));
                writeln!(
                    f,
                    "{step},{:.6e},{:e},{},{},{}",
                    result.loss,
                    state.adam.lr,
                    started.elapsed().as_millis(),
                    aux("t_mean"),
                    aux("tprime_mean")
                )
                .map_err(|e| LabError::io(&*path, e))?;
            }
        }
        if let Some(path) = opts.state_path() {
            if step % opts.checkpoint_every == 0 || step == opts.steps {
                state.save(&path)?;
            }
        }
        if opts.stop_after == Some(step) {
            break;
        }
    }
    Ok(report)
}
