//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "DLCK"
//! version    u32      1
//! kind       u8       0 = mlp2d, 1 = tiny_unet
//! config     u32 n, then n × u32 hyperparameters
//! tensors    u32 count, then per tensor:
//!              u32 name length, name bytes (UTF-8),
//!              u32 rank, rank × u32 dims,
//!              prod(dims) × f32 payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use difflab_autodiff::{ParamStore, Tensor};

use super::{Denoiser, DenoiserModel, MlpConfig, ModelConfig, UnetConfig};
use crate::error::{LabError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn fmt_err(detail: impl Into<String>) -> LabError {
    LabError::Format { path: "<checkpoint>".into(), detail: detail.into() }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Cursor over a byte buffer with format-error reporting.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| fmt_err("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    pub fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.bytes(len)?).map_err(|_| fmt_err("tensor name is not UTF-8"))?.to_string();
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(fmt_err(format!("implausible rank {rank} for `{name}`")));
        }
        let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = self.bytes(n.checked_mul(4).ok_or_else(|| fmt_err("tensor too large"))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok((name, Tensor::new(dims, data)?))
    }

    pub fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn config_words(config: &ModelConfig) -> (u8, Vec<u32>) {
    match config {
        ModelConfig::Mlp2d(c) => (
            0,
            vec![
                c.data_dim as u32,
                c.hidden as u32,
                c.time_dim as u32,
                c.class_dim as u32,
                c.num_classes as u32,
                c.timesteps as u32,
                c.zero_init_output as u32,
            ],
        ),
        ModelConfig::TinyUnet(c) => (
            1,
            vec![
                c.image_size as u32,
                c.in_channels as u32,
                c.channels[0] as u32,
                c.channels[1] as u32,
                c.channels[2] as u32,
                c.time_dim as u32,
                c.num_classes as u32,
                c.timesteps as u32,
                c.zero_init_output as u32,
            ],
        ),
    }
}

fn config_from_words(kind: u8, w: &[u32]) -> Result<ModelConfig> {
    let u = |i: usize| w[i] as usize;
    match (kind, w.len()) {
        (0, 7) => Ok(ModelConfig::Mlp2d(MlpConfig {
            data_dim: u(0),
            hidden: u(1),
            time_dim: u(2),
            class_dim: u(3),
            num_classes: u(4),
            timesteps: u(5),
            zero_init_output: w[6] != 0,
        })),
        (1, 9) => Ok(ModelConfig::TinyUnet(UnetConfig {
            image_size: u(0),
            in_channels: u(1),
            channels: [u(2), u(3), u(4)],
            time_dim: u(5),
            num_classes: u(6),
            timesteps: u(7),
            zero_init_output: w[8] != 0,
        })),
        _ => Err(fmt_err(format!("unknown model kind {kind} with {} config words", w.len()))),
    }
}

pub(crate) fn encode_header(out: &mut Vec<u8>, config: &ModelConfig) {
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(out, CHECKPOINT_VERSION);
    let (kind, words) = config_words(config);
    out.push(kind);
    put_u32(out, words.len() as u32);
    for w in words {
        put_u32(out, w);
    }
}

pub(crate) fn decode_header(r: &mut Reader<'_>) -> Result<ModelConfig> {
    if r.bytes(4)? != CHECKPOINT_MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let kind = r.u8()?;
    let n = r.u32()? as usize;
    if n > 64 {
        return Err(fmt_err("implausible config length"));
    }
    let words = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    config_from_words(kind, &words)
}

pub(crate) fn encode_store(out: &mut Vec<u8>, store: &ParamStore<f32>) {
    put_u32(out, store.len() as u32);
    for (name, t) in store.iter() {
        put_tensor(out, name, t);
    }
}

/// Reads tensors into a freshly built model of `config`, checking layout.
pub(crate) fn decode_store_into(r: &mut Reader<'_>, model: &mut DenoiserModel<f32>) -> Result<()> {
    let count = r.u32()? as usize;
    let store = model.params_mut();
    if count != store.len() {
        return Err(fmt_err(format!("expected {} tensors, found {count}", store.len())));
    }
    for i in 0..count {
        let (name, t) = r.tensor()?;
        if store.names()[i] != name {
            return Err(fmt_err(format!("tensor {i} is `{name}`, expected `{}`", store.names()[i])));
        }
        store.set_data(i, t).map_err(|e| fmt_err(format!("`{name}`: {e}")))?;
    }
    Ok(())
}

/// Serializes a model to bytes.
pub fn write_checkpoint(model: &DenoiserModel<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    encode_header(&mut out, &model.config());
    encode_store(&mut out, model.params());
    out
}

/// Rebuilds a model from checkpoint bytes.
pub fn read_checkpoint(bytes: &[u8]) -> Result<DenoiserModel<f32>> {
    let mut r = Reader::new(bytes);
    let config = decode_header(&mut r)?;
    // Initial values are overwritten by the stored tensors.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut model = config.build::<f32, _>(&mut rng)?;
    decode_store_into(&mut r, &mut model)?;
    if !r.finished() {
        return Err(fmt_err("trailing bytes"));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &DenoiserModel<f32>, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(model);
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| LabError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<DenoiserModel<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| LabError::io(path, e))?;
    read_checkpoint(&bytes).map_err(|e| match e {
        LabError::Format { detail, .. } => LabError::Format { path: path.display().to_string(), detail },
        other => other,
    })
}
