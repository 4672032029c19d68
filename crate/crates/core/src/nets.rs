//! Convolutional building blocks shared by the codecs, the latent mapper
//! and the denoiser.

use rand::Rng;
use xct_tensor::{init, Bound, ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::Result;

pub const GROUPS: usize = 4;

#[derive(Clone, Debug)]
pub struct Conv {
    weight: ParamId,
    bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), init::conv_kernel(c_out, c_in, k, rng))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?,
            stride,
            pad,
        })
    }

    /// Same-padding stride-1 conv.
    pub fn same<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(store, name, c_in, c_out, k, 1, k / 2, rng)
    }

    /// Stride-2, k = 3 downsampling conv (halves each extent).
    pub fn down<R: Rng>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Result<Self> {
        Self::new(store, name, c_in, c_out, 3, 2, 1, rng)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.conv3d(x, p[self.weight], Some(p[self.bias]), self.stride, self.pad)?)
    }

    pub fn scale_weight(&self, store: &mut ParamStore, factor: f32) {
        store
            .get_mut(self.weight)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v *= factor);
    }
}

/// k = 2, stride-2 transposed conv (doubles each extent).
#[derive(Clone, Debug)]
pub struct Up {
    weight: ParamId,
    bias: ParamId,
}

impl Up {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            weight: store.add(
                format!("{name}.weight"),
                init::transposed_kernel(c_in, c_out, 2, 2, rng),
            )?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.transposed_conv3d(x, p[self.weight], Some(p[self.bias]), 2, 0)?)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?,
        })
    }

    /// Group norm followed by SiLU.
    pub fn forward_act(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.group_norm(x, p[self.gamma], p[self.beta], GROUPS)?;
        Ok(tape.silu(y))
    }
}

/// Dense layer on `[N, in]` rows; weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    weight: ParamId,
    bias: ParamId,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            weight: store.add(
                format!("{name}.weight"),
                init::fan_in_uniform(&[c_in, c_out], c_in, rng),
            )?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.weight])?;
        Ok(tape.add_channel(y, p[self.bias])?)
    }
}

/// Sinusoidal embedding of integer timesteps, `[N, dim]`.
pub fn timestep_embedding(steps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        for i in 0..dim {
            let freq = (-(10_000f64.ln()) * (i % half) as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            data.push(if i < half { arg.sin() } else { arg.cos() } as f32);
        }
    }
    Tensor::new(&[steps.len(), dim], data).expect("embedding shape")
}

pub const TIME_DIM: usize = 32;
const TIME_HIDDEN: usize = 64;

#[derive(Clone, Debug)]
struct TimeMlp {
    hidden: Dense,
    stages: [Dense; 4],
}

/// Two-stage 3D U-net on latent grids (extents divisible by 4), with an
/// optional timestep embedding added as a per-channel bias at every stage.
#[derive(Clone, Debug)]
pub struct UNet {
    inc: Conv,
    inc_norm: Norm,
    down1: Conv,
    down1_norm: Norm,
    down2: Conv,
    down2_norm: Norm,
    up2: Up,
    up2_conv: Conv,
    up2_norm: Norm,
    up1: Up,
    up1_conv: Conv,
    up1_norm: Norm,
    out: Conv,
    time: Option<TimeMlp>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub base: usize,
}

impl UNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        base: usize,
        with_time: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let c = base;
        let n = |s: &str| format!("{prefix}.{s}");
        let time = if with_time {
            Some(TimeMlp {
                hidden: Dense::new(store, &n("time.hidden"), TIME_DIM, TIME_HIDDEN, rng)?,
                stages: [
                    Dense::new(store, &n("time.inc"), TIME_HIDDEN, c, rng)?,
                    Dense::new(store, &n("time.down1"), TIME_HIDDEN, 2 * c, rng)?,
                    Dense::new(store, &n("time.up2"), TIME_HIDDEN, 2 * c, rng)?,
                    Dense::new(store, &n("time.up1"), TIME_HIDDEN, c, rng)?,
                ],
            })
        } else {
            None
        };
        let unet = Self {
            inc: Conv::same(store, &n("inc"), in_channels, c, 3, rng)?,
            inc_norm: Norm::new(store, &n("inc.norm"), c)?,
            down1: Conv::down(store, &n("down1"), c, 2 * c, rng)?,
            down1_norm: Norm::new(store, &n("down1.norm"), 2 * c)?,
            down2: Conv::down(store, &n("down2"), 2 * c, 2 * c, rng)?,
            down2_norm: Norm::new(store, &n("down2.norm"), 2 * c)?,
            up2: Up::new(store, &n("up2"), 2 * c, 2 * c, rng)?,
            up2_conv: Conv::same(store, &n("up2.conv"), 4 * c, 2 * c, 3, rng)?,
            up2_norm: Norm::new(store, &n("up2.norm"), 2 * c)?,
            up1: Up::new(store, &n("up1"), 2 * c, c, rng)?,
            up1_conv: Conv::same(store, &n("up1.conv"), 2 * c, c, 3, rng)?,
            up1_norm: Norm::new(store, &n("up1.norm"), c)?,
            out: Conv::same(store, &n("out"), c, out_channels, 3, rng)?,
            time,
            in_channels,
            out_channels,
            base,
        };
        Ok(unet)
    }

    pub fn has_time(&self) -> bool {
        self.time.is_some()
    }

    /// `x`: `[N, in, D, H, W]`; `steps`: one timestep per sample when the
    /// net carries a time embedding.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, steps: Option<&[usize]>) -> Result<Var> {
        let biases = match (&self.time, steps) {
            (Some(mlp), Some(steps)) => {
                let emb = tape.constant(timestep_embedding(steps, TIME_DIM));
                let h = mlp.hidden.forward(tape, p, emb)?;
                let h = tape.silu(h);
                let mut out = Vec::with_capacity(4);
                for stage in &mlp.stages {
                    out.push(Some(stage.forward(tape, p, h)?));
                }
                out
            }
            _ => vec![None; 4],
        };
        let add_t = |tape: &mut Tape, x: Var, b: Option<Var>| -> Result<Var> {
            match b {
                Some(b) => Ok(tape.add_channel(x, b)?),
                None => Ok(x),
            }
        };

        let h = self.inc.forward(tape, p, x)?;
        let h = add_t(tape, h, biases[0])?;
        let s1 = self.inc_norm.forward_act(tape, p, h)?;

        let h = self.down1.forward(tape, p, s1)?;
        let h = add_t(tape, h, biases[1])?;
        let s2 = self.down1_norm.forward_act(tape, p, h)?;

        let h = self.down2.forward(tape, p, s2)?;
        let h = self.down2_norm.forward_act(tape, p, h)?;

        let h = self.up2.forward(tape, p, h)?;
        let h = tape.concat_channels(&[h, s2])?;
        let h = self.up2_conv.forward(tape, p, h)?;
        let h = add_t(tape, h, biases[2])?;
        let h = self.up2_norm.forward_act(tape, p, h)?;

        let h = self.up1.forward(tape, p, h)?;
        let h = tape.concat_channels(&[h, s1])?;
        let h = self.up1_conv.forward(tape, p, h)?;
        let h = add_t(tape, h, biases[3])?;
        let h = self.up1_norm.forward_act(tape, p, h)?;

        self.out.forward(tape, p, h)
    }
}
