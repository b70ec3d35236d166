use difflab_autodiff::{Float, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use super::{time_embedding_batch, validate_batch, Conditioning, Denoiser, FeatureTap, ForwardOutput, ForwardRequest};
use crate::error::{LabError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct UnetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Widths of the three resolutions, finest first.
    pub channels: [usize; 3],
    pub time_dim: usize,
    pub num_classes: usize,
    pub timesteps: usize,
    pub zero_init_output: bool,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            in_channels: 1,
            channels: [32, 64, 128],
            time_dim: 32,
            num_classes: 4,
            timesteps: 1000,
            zero_init_output: false,
        }
    }
}

const NORM_EPS: f64 = 1e-5;

fn groups_for(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

#[derive(Clone, Copy, Debug)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    emb: Conv,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

struct Builder<'r, T: Float, R: Rng + ?Sized> {
    params: ParamStore<T>,
    rng: &'r mut R,
}

impl<T: Float, R: Rng + ?Sized> Builder<'_, T, R> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, zero: bool) -> Conv {
        let w = if zero {
            Tensor::zeros([cout, cin, k, k])
        } else {
            Tensor::kaiming_uniform([cout, cin, k, k], cin * k * k, self.rng)
        };
        Conv {
            weight: self.params.push(format!("{name}.weight"), w),
            bias: self.params.push(format!("{name}.bias"), Tensor::zeros([cout])),
        }
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Conv {
        Conv {
            weight: self.params.push(format!("{name}.weight"), Tensor::kaiming_uniform([fan_in, fan_out], fan_in, self.rng)),
            bias: self.params.push(format!("{name}.bias"), Tensor::zeros([fan_out])),
        }
    }

    fn norm(&mut self, name: &str, channels: usize) -> Norm {
        Norm {
            gamma: self.params.push(format!("{name}.gamma"), Tensor::full([channels], T::one())),
            beta: self.params.push(format!("{name}.beta"), Tensor::zeros([channels])),
            groups: groups_for(channels),
        }
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, emb_dim: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, false),
            emb: self.linear(&format!("{name}.emb"), emb_dim, cout),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, false),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, false)),
        }
    }
}

/// Three-resolution U-Net for small images.
///
/// Encoder: one residual block per resolution with a 3×3 stride-2
/// convolution between resolutions. The midblock is a residual block at the
/// coarsest resolution. The decoder mirrors the encoder with skip
/// concatenation and nearest-upsample + 3×3 convolution. Time and class
/// embeddings are summed and injected into every residual block.
#[derive(Clone, Debug)]
pub struct TinyUnet<T: Float = f32> {
    config: UnetConfig,
    shape: Vec<usize>,
    params: ParamStore<T>,
    time1: Conv,
    time2: Conv,
    class_table: usize,
    conv_in: Conv,
    enc: [ResBlock; 3],
    down: [Conv; 2],
    mid: ResBlock,
    dec: [ResBlock; 3],
    up: [Conv; 2],
    norm_out: Norm,
    conv_out: Conv,
}

impl<T: Float> TinyUnet<T> {
    pub fn new<R: Rng + ?Sized>(config: UnetConfig, rng: &mut R) -> Result<Self> {
        if config.image_size == 0 || config.image_size % 4 != 0 || config.channels.contains(&0) || config.time_dim % 2 != 0 {
            return Err(LabError::config(format!("invalid U-Net configuration {config:?}")));
        }
        let [c0, c1, c2] = config.channels;
        let emb = 4 * c0;
        let mut b = Builder { params: ParamStore::new(), rng };
        let time1 = b.linear("time.lin1", config.time_dim, emb);
        let time2 = b.linear("time.lin2", emb, emb);
        let class_table = b.params.push("class_embed", Tensor::randn([config.num_classes + 1, emb], b.rng));
        let conv_in = b.conv("conv_in", config.in_channels, c0, 3, false);
        let enc = [b.res_block("enc0", c0, c0, emb), b.res_block("enc1", c0, c1, emb), b.res_block("enc2", c1, c2, emb)];
        let down = [b.conv("down0", c0, c0, 3, false), b.conv("down1", c1, c1, 3, false)];
        let mid = b.res_block("mid", c2, c2, emb);
        let dec = [
            b.res_block("dec2", c2 + c2, c2, emb),
            b.res_block("dec1", c2 + c1, c1, emb),
            b.res_block("dec0", c1 + c0, c0, emb),
        ];
        let up = [b.conv("up2", c2, c2, 3, false), b.conv("up1", c1, c1, 3, false)];
        let norm_out = b.norm("norm_out", c0);
        let conv_out = b.conv("conv_out", c0, config.in_channels, 3, config.zero_init_output);
        Ok(Self {
            shape: vec![config.in_channels, config.image_size, config.image_size],
            config,
            params: b.params,
            time1,
            time2,
            class_table,
            conv_in,
            enc,
            down,
            mid,
            dec,
            up,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.config
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Float>(&self) -> TinyUnet<U> {
        TinyUnet {
            config: self.config.clone(),
            shape: self.shape.clone(),
            params: self.params.cast(),
            time1: self.time1,
            time2: self.time2,
            class_table: self.class_table,
            conv_in: self.conv_in,
            enc: self.enc,
            down: self.down,
            mid: self.mid,
            dec: self.dec,
            up: self.up,
            norm_out: self.norm_out,
            conv_out: self.conv_out,
        }
    }
}

fn conv(tape: &mut Tape<impl Float>, p: &[Var], c: Conv, x: Var, stride: usize) -> Result<Var> {
    Ok(tape.conv2d(x, p[c.weight], Some(p[c.bias]), stride)?)
}

fn norm_act<T: Float>(tape: &mut Tape<T>, p: &[Var], n: Norm, x: Var) -> Result<Var> {
    let h = tape.group_norm(x, p[n.gamma], p[n.beta], n.groups, T::of(NORM_EPS))?;
    Ok(tape.silu(h))
}

fn res_block<T: Float>(tape: &mut Tape<T>, p: &[Var], blk: ResBlock, x: Var, emb_act: Var) -> Result<Var> {
    let h = norm_act(tape, p, blk.norm1, x)?;
    let h = conv(tape, p, blk.conv1, h, 1)?;
    let e = tape.linear(emb_act, p[blk.emb.weight], p[blk.emb.bias])?;
    let h = tape.add_channel(h, e)?;
    let h = norm_act(tape, p, blk.norm2, h)?;
    let h = conv(tape, p, blk.conv2, h, 1)?;
    let skip = match blk.skip {
        Some(s) => conv(tape, p, s, x, 1)?,
        None => x,
    };
    Ok(tape.add(skip, h)?)
}

impl<T: Float> Denoiser<T> for TinyUnet<T> {
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
        p: &[Var],
        x: Var,
        t: &[usize],
        c: &[Conditioning],
        request: ForwardRequest,
    ) -> Result<ForwardOutput> {
        validate_batch(self, tape.shape(x), t, c)?;
        let rows = c.iter().map(|ci| ci.embedding_row(self.config.num_classes)).collect::<Result<Vec<_>>>()?;

        let sin = tape.constant(time_embedding_batch(t, self.config.time_dim, self.config.timesteps)?);
        let e = tape.linear(sin, p[self.time1.weight], p[self.time1.bias])?;
        let e = tape.silu(e);
        let e = tape.linear(e, p[self.time2.weight], p[self.time2.bias])?;
        let class = tape.gather_rows(p[self.class_table], &rows)?;
        let emb = tape.add(e, class)?;
        let emb_act = tape.silu(emb);

        let h = conv(tape, p, self.conv_in, x, 1)?;
        let e0 = res_block(tape, p, self.enc[0], h, emb_act)?;
        let h = conv(tape, p, self.down[0], e0, 2)?;
        let e1 = res_block(tape, p, self.enc[1], h, emb_act)?;
        let h = conv(tape, p, self.down[1], e1, 2)?;
        let e2 = res_block(tape, p, self.enc[2], h, emb_act)?;
        let mid = res_block(tape, p, self.mid, e2, emb_act)?;

        let decoder_needed = request.need_output || request.tap.is_some_and(FeatureTap::needs_decoder);
        let mut v = None;
        let mut decoded = Vec::new();
        if decoder_needed {
            let h = tape.concat1(&[mid, e2])?;
            let d2 = res_block(tape, p, self.dec[0], h, emb_act)?;
            let h = tape.upsample2x(d2)?;
            let h = conv(tape, p, self.up[0], h, 1)?;
            let h = tape.concat1(&[h, e1])?;
            let d1 = res_block(tape, p, self.dec[1], h, emb_act)?;
            let h = tape.upsample2x(d1)?;
            let h = conv(tape, p, self.up[1], h, 1)?;
            let h = tape.concat1(&[h, e0])?;
            let d0 = res_block(tape, p, self.dec[2], h, emb_act)?;
            decoded = vec![d2, d1, d0];
            if request.need_output {
                let h = norm_act(tape, p, self.norm_out, d0)?;
                v = Some(conv(tape, p, self.conv_out, h, 1)?);
            }
        }
        let features = match request.tap {
            None => vec![],
            Some(FeatureTap::EncoderAll) => vec![e0, e1, e2],
            Some(FeatureTap::EncoderPlusMid) => vec![e0, e1, e2, mid],
            Some(FeatureTap::MidOnly) => vec![mid],
            Some(FeatureTap::DecoderAll) => decoded,
        };
        Ok(ForwardOutput { v, features })
    }
}
