use difflab_autodiff::{Float, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use super::{time_embedding_batch, validate_batch, Conditioning, Denoiser, FeatureTap, ForwardOutput, ForwardRequest};
use crate::error::{LabError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MlpConfig {
    pub data_dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub class_dim: usize,
    pub num_classes: usize,
    pub timesteps: usize,
    pub zero_init_output: bool,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self { data_dim: 2, hidden: 256, time_dim: 32, class_dim: 16, num_classes: 8, timesteps: 1000, zero_init_output: false }
    }
}

const HIDDEN_LAYERS: usize = 4;

/// Point-cloud denoiser: `concat(x_t, time_embed, class_embed)` through four
/// SiLU layers. Layers 1–2 play the encoder, layer 2 the midblock, layers
/// 3–4 the decoder.
#[derive(Clone, Debug)]
pub struct Mlp2d<T: Float = f32> {
    config: MlpConfig,
    shape: Vec<usize>,
    params: ParamStore<T>,
    class_table: usize,
    layers: Vec<(usize, usize)>,
}

impl<T: Float> Mlp2d<T> {
    pub fn new<R: Rng + ?Sized>(config: MlpConfig, rng: &mut R) -> Result<Self> {
        if config.data_dim == 0 || config.hidden == 0 || config.time_dim % 2 != 0 || config.timesteps == 0 {
            return Err(LabError::config(format!("invalid MLP configuration {config:?}")));
        }
        let mut params = ParamStore::new();
        let class_table = params.push("class_embed", Tensor::randn([config.num_classes + 1, config.class_dim], rng));
        let mut layers = Vec::new();
        let mut fan_in = config.data_dim + config.time_dim + config.class_dim;
        for i in 0..=HIDDEN_LAYERS {
            let last = i == HIDDEN_LAYERS;
            let fan_out = if last { config.data_dim } else { config.hidden };
            let name = if last { "out".to_string() } else { format!("layer{}", i + 1) };
            let w = if last && config.zero_init_output {
                Tensor::zeros([fan_in, fan_out])
            } else {
                Tensor::kaiming_uniform([fan_in, fan_out], fan_in, rng)
            };
            let wi = params.push(format!("{name}.weight"), w);
            let bi = params.push(format!("{name}.bias"), Tensor::zeros([fan_out]));
            layers.push((wi, bi));
            fan_in = config.hidden;
        }
        Ok(Self { shape: vec![config.data_dim], config, params, class_table, layers })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Float>(&self) -> Mlp2d<U> {
        Mlp2d {
            config: self.config.clone(),
            shape: self.shape.clone(),
            params: self.params.cast(),
            class_table: self.class_table,
            layers: self.layers.clone(),
        }
    }
}

impl<T: Float> Denoiser<T> for Mlp2d<T> {
    fn sample_shape(&self) -> &[usize] {
        &self.shape
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn timesteps(&self) -> usize {
        self.config.timesteps
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn trace(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x: Var,
        t: &[usize],
        c: &[Conditioning],
        request: ForwardRequest,
    ) -> Result<ForwardOutput> {
        validate_batch(self, tape.shape(x), t, c)?;
        let rows = c.iter().map(|ci| ci.embedding_row(self.config.num_classes)).collect::<Result<Vec<_>>>()?;
        let temb = tape.constant(time_embedding_batch(t, self.config.time_dim, self.config.timesteps)?);
        let cemb = tape.gather_rows(params[self.class_table], &rows)?;
        let mut h = tape.concat1(&[x, temb, cemb])?;

        let stop_after = match (request.need_output, request.tap) {
            (true, _) | (false, None) => HIDDEN_LAYERS,
            (false, Some(tap)) if tap.needs_decoder() => HIDDEN_LAYERS,
            (false, Some(_)) => 2,
        };
        let mut hidden = Vec::with_capacity(HIDDEN_LAYERS);
        for &(w, b) in &self.layers[..stop_after] {
            let pre = tape.linear(h, params[w], params[b])?;
            h = tape.silu(pre);
            hidden.push(h);
        }
        let v = if request.need_output {
            let (w, b) = self.layers[HIDDEN_LAYERS];
            Some(tape.linear(h, params[w], params[b])?)
        } else {
            None
        };
        let features = match request.tap {
            None => vec![],
            Some(FeatureTap::EncoderAll) | Some(FeatureTap::EncoderPlusMid) => vec![hidden[0], hidden[1]],
            Some(FeatureTap::MidOnly) => vec![hidden[1]],
            Some(FeatureTap::DecoderAll) => vec![hidden[2], hidden[3]],
        };
        Ok(ForwardOutput { v, features })
    }
}
