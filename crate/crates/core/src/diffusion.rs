//! Conditional latent diffusion with x0-prediction.
//!
//! The reverse update is
//! `z_{t-1} = (z_t − (1−α_t)/(1−ᾱ_t) · (z_t − √ᾱ_t·g)) / √α_t`
//! where `g` is the denoiser's estimate of `z_0`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use xct_tensor::{checkpoint, Adam, AdamConfig, Bound, ParamStore, Tape, Tensor, Var};

use crate::codec::LatentGrid;
use crate::error::{invalid, shape, Result, XctError};
use crate::geometry::Extent3;
use crate::io::write_atomic;
use crate::nets::UNet;
use crate::train::LossCurve;

pub const COSINE_OFFSET: f64 = 0.008;
pub const ALPHA_MIN: f64 = 0.001;
pub const ALPHA_MAX: f64 = 0.9999;
const CONFIG_TENSOR: &str = "denoiser.config";

/// `α_t` and `ᾱ_t` for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from per-step `α_t`; `ᾱ_t` is their running product.
    pub fn from_alphas(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return invalid("a noise schedule needs T ≥ 1");
        }
        if let Some(a) = alpha.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return invalid(format!("α_t must lie in (0, 1), got {a}"));
        }
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self { alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    /// `α_t`, `1 ≤ t ≤ T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, `0 ≤ t ≤ T` (`ᾱ_0 = 1`).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return invalid(format!("timestep {t} outside 1..={}", self.steps()));
        }
        Ok(())
    }
}

/// Squared-cosine schedule with offset `s = 0.008`; `α_t` clipped to
/// `[0.001, 0.9999]` and `ᾱ_t` taken as the product of the clipped `α`.
pub fn cosine_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return invalid("cosine schedule needs T ≥ 1");
    }
    let s = COSINE_OFFSET;
    let f = |t: usize| {
        let x = (t as f64 / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0);
    let alpha = (1..=steps)
        .map(|t| ((f(t) / f0) / (f(t - 1) / f0)).clamp(ALPHA_MIN, ALPHA_MAX))
        .collect();
    NoiseSchedule::from_alphas(alpha)
}

pub fn standard_normal(len: usize, rng: &mut impl Rng) -> Vec<f32> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect()
}

/// `z_t = √ᾱ_t·z_0 + √(1−ᾱ_t)·ε` for a given `ε`.
pub fn forward_noise_with(z0: &LatentGrid, t: usize, schedule: &NoiseSchedule, eps: &[f32]) -> Result<LatentGrid> {
    schedule.check_t(t)?;
    if eps.len() != z0.values().len() {
        return shape("forward_noise", format!("{} noise values for {}", eps.len(), z0.values().len()));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let values = z0
        .values()
        .iter()
        .zip(eps)
        .map(|(&z, &e)| (a * z as f64 + b * e as f64) as f32)
        .collect();
    LatentGrid::new(z0.extent(), z0.dim(), values)
}

/// Noises `z0` to step `t` with seeded Gaussian `ε`; returns `(z_t, ε)`.
pub fn forward_noise(
    z0: &LatentGrid,
    t: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<(LatentGrid, Vec<f32>)> {
    schedule.check_t(t)?;
    let eps = standard_normal(z0.values().len(), &mut ChaCha8Rng::seed_from_u64(seed));
    Ok((forward_noise_with(z0, t, schedule, &eps)?, eps))
}

/// Conditioning latents; `z_new` is absent for the input-view-only arm.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub z_in: LatentGrid,
    pub z_new: Option<LatentGrid>,
}

impl Condition {
    pub fn new(z_in: LatentGrid, z_new: Option<LatentGrid>) -> Result<Self> {
        if let Some(z) = &z_new {
            if !z.same_shape(&z_in) {
                return shape(
                    "condition",
                    format!(
                        "z_new {:?}×{} vs z_in {:?}×{}",
                        z.extent().as_array(),
                        z.dim(),
                        z_in.extent().as_array(),
                        z_in.dim()
                    ),
                );
            }
        }
        Ok(Self { z_in, z_new })
    }

    /// Channels `z_in ‖ z_new ‖ presence flag`.
    fn channels(&self) -> Vec<f32> {
        let n = self.z_in.values().len();
        let positions = self.z_in.positions();
        let mut out = Vec::with_capacity(2 * n + positions);
        out.extend_from_slice(self.z_in.values());
        match &self.z_new {
            Some(z) => {
                out.extend_from_slice(z.values());
                out.extend(std::iter::repeat_n(1.0, positions));
            }
            None => {
                out.extend(std::iter::repeat_n(0.0, n + positions));
            }
        }
        out
    }
}

/// Anything that predicts `z_0` from `(z_t, condition, t)`.
pub trait X0Predictor {
    fn predict(&self, z_t: &LatentGrid, cond: &Condition, t: usize) -> Result<LatentGrid>;
}

impl<F> X0Predictor for F
where
    F: Fn(&LatentGrid, &Condition, usize) -> Result<LatentGrid>,
{
    fn predict(&self, z_t: &LatentGrid, cond: &Condition, t: usize) -> Result<LatentGrid> {
        self(z_t, cond, t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_dim: usize,
    pub base_channels: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_dim: 4,
            base_channels: 32,
        }
    }
}

/// `g_θ(z_t, z_in, z_new, t)`: a time-conditioned U-net over
/// `z_t ‖ z_in ‖ z_new ‖ flag`.
#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    store: ParamStore,
    net: UNet,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        if config.latent_dim == 0 || config.base_channels == 0 || config.base_channels % crate::nets::GROUPS != 0 {
            return invalid(format!("invalid denoiser config {config:?}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let n = config.latent_dim;
        let net = UNet::new(&mut store, "g", 3 * n + 1, n, config.base_channels, true, &mut rng)?;
        Ok(Self { config, store, net })
    }

    pub fn config(&self) -> DenoiserConfig {
        self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn is_finite(&self) -> bool {
        self.store.all_finite()
    }

    fn input(&self, items: &[(&LatentGrid, &Condition)]) -> Result<Tensor> {
        let first = items[0].0;
        let e = first.extent();
        let n = self.config.latent_dim;
        if first.dim() != n {
            return shape("denoiser", format!("latent dim {} vs denoiser dim {n}", first.dim()));
        }
        let mut data = Vec::new();
        for (z, c) in items {
            if !z.same_shape(first) || !c.z_in.same_shape(first) {
                return shape(
                    "denoiser",
                    format!(
                        "z_t {:?}×{} vs z_in {:?}×{}",
                        z.extent().as_array(),
                        z.dim(),
                        c.z_in.extent().as_array(),
                        c.z_in.dim()
                    ),
                );
            }
            if e.d % 4 != 0 || e.h % 4 != 0 || e.w % 4 != 0 {
                return shape("denoiser", format!("latent extents {:?} must be multiples of 4", e.as_array()));
            }
            data.extend_from_slice(z.values());
            data.extend(c.channels());
        }
        Ok(Tensor::new(&[items.len(), 3 * n + 1, e.d, e.h, e.w], data)?)
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Tensor, steps: &[usize]) -> Result<Var> {
        let x = tape.constant(x);
        self.net.forward(tape, p, x, Some(steps))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Tensor::new(&[2], vec![self.config.latent_dim as f32, self.config.base_channels as f32])?;
        write_atomic(
            path,
            &checkpoint::encode(self.store.iter().chain([(CONFIG_TENSOR, &meta)]))?,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let fmt = |detail: String| XctError::Format {
            path: path.display().to_string(),
            detail,
        };
        let bytes = fs::read(path).map_err(|e| fmt(e.to_string()))?;
        let mut named = checkpoint::decode::<f32>(&bytes).map_err(|e| fmt(e.to_string()))?;
        let Some(pos) = named.iter().position(|(n, _)| n == CONFIG_TENSOR) else {
            return Err(fmt(format!("not a denoiser checkpoint (no `{CONFIG_TENSOR}`)")));
        };
        let cfg = named.remove(pos).1;
        if cfg.numel() != 2 {
            return Err(fmt("malformed denoiser config tensor".into()));
        }
        let config = DenoiserConfig {
            latent_dim: cfg.data()[0] as usize,
            base_channels: cfg.data()[1] as usize,
        };
        let mut d = Self::new(config, 0)?;
        d.store.load_named(named).map_err(|e| fmt(e.to_string()))?;
        if !d.is_finite() {
            return Err(XctError::Model(format!("{}: non-finite denoiser weights", path.display())));
        }
        Ok(d)
    }
}

impl X0Predictor for Denoiser {
    fn predict(&self, z_t: &LatentGrid, cond: &Condition, t: usize) -> Result<LatentGrid> {
        let x = self.input(&[(z_t, cond)])?;
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let y = self.forward(&mut tape, &p, x, &[t])?;
        LatentGrid::new(z_t.extent(), z_t.dim(), tape.value(y).data().to_vec())
    }
}

/// One step of the reverse update for a given `z_0` estimate.
pub fn reverse_step(z_t: &[f32], g: &[f32], t: usize, schedule: &NoiseSchedule) -> Vec<f32> {
    let a = schedule.alpha(t);
    let ab = schedule.alpha_bar(t);
    let c = (1.0 - a) / (1.0 - ab);
    let (inv, sab) = (1.0 / a.sqrt(), ab.sqrt());
    z_t.iter()
        .zip(g)
        .map(|(&z, &g)| {
            let z = z as f64;
            (inv * (z - c * (z - sab * g as f64))) as f32
        })
        .collect()
}

/// Per-step latent norms of a sampling run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleTrace {
    /// `(t, ‖z_t‖, ‖g‖)` before each update.
    pub rows: Vec<(usize, f64, f64)>,
}

impl SampleTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,z_norm,x0_norm\n");
        for (t, z, g) in &self.rows {
            out.push_str(&format!("{t},{z},{g}\n"));
        }
        out
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
}

/// Reverse sweep from `z_T ∼ N(0, I)` down to `z_0`.
///
/// With `stochastic`, `N(0, (1−α_t) I)` noise is added after each update
/// for `t > 1`.
pub fn sample<P: X0Predictor + ?Sized>(
    predictor: &P,
    cond: &Condition,
    schedule: &NoiseSchedule,
    seed: u64,
    stochastic: bool,
) -> Result<LatentGrid> {
    sample_traced(predictor, cond, schedule, seed, stochastic).map(|(z, _)| z)
}

pub fn sample_traced<P: X0Predictor + ?Sized>(
    predictor: &P,
    cond: &Condition,
    schedule: &NoiseSchedule,
    seed: u64,
    stochastic: bool,
) -> Result<(LatentGrid, SampleTrace)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape_of = &cond.z_in;
    let start = standard_normal(shape_of.values().len(), &mut rng);
    sample_from(predictor, cond, schedule, LatentGrid::new(shape_of.extent(), shape_of.dim(), start)?, &mut rng, stochastic)
}

/// Reverse sweep from an explicit `z_T`.
pub fn sample_from<P: X0Predictor + ?Sized>(
    predictor: &P,
    cond: &Condition,
    schedule: &NoiseSchedule,
    z_start: LatentGrid,
    rng: &mut impl Rng,
    stochastic: bool,
) -> Result<(LatentGrid, SampleTrace)> {
    let mut z = z_start;
    let mut trace = SampleTrace::default();
    for t in (1..=schedule.steps()).rev() {
        let g = predictor.predict(&z, cond, t)?;
        if !g.same_shape(&z) {
            return shape("sample", "denoiser output shape differs from z_t");
        }
        if g.values().iter().any(|v| !v.is_finite()) {
            return Err(XctError::Model(format!("denoiser produced non-finite output at t={t}")));
        }
        trace.rows.push((t, norm(z.values()), norm(g.values())));
        let mut next = reverse_step(z.values(), g.values(), t, schedule);
        if stochastic && t > 1 {
            let sd = (1.0 - schedule.alpha(t)).sqrt();
            for v in next.iter_mut() {
                *v += (sd * rng.sample::<f64, _>(StandardNormal)) as f32;
            }
        }
        z = LatentGrid::new(z.extent(), z.dim(), next)?;
    }
    Ok((z, trace))
}

/// Training pair: clean CT latent and its conditioning latents.
#[derive(Clone, Debug)]
pub struct DiffusionExample {
    pub z0: LatentGrid,
    pub cond: Condition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 2e-4,
            batch_size: 2,
            seed: 0,
        }
    }
}

/// Minimizes `‖g_θ(z_t, z_in, z_new, t) − z_0‖²` with `t` drawn uniformly
/// from `1..=T` for every example of every batch.
pub fn train_denoiser(
    mut den: Denoiser,
    data: &[DiffusionExample],
    schedule: &NoiseSchedule,
    config: &DenoiserTrainConfig,
) -> Result<(Denoiser, LossCurve)> {
    if data.is_empty() {
        return invalid("denoiser training needs a non-empty dataset");
    }
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return invalid(format!("batch size must be ≥ 1 and lr > 0, got {config:?}"));
    }
    let mut curve = LossCurve::default();
    if config.epochs == 0 {
        return Ok((den, curve));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&den.store, AdamConfig::with_lr(config.lr));
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let first = curve.steps.len();
        for chunk in order.chunks(config.batch_size) {
            let steps: Vec<usize> = chunk.iter().map(|_| rng.random_range(1..=schedule.steps())).collect();
            let noised: Vec<LatentGrid> = chunk
                .iter()
                .zip(&steps)
                .map(|(&i, &t)| {
                    let eps = standard_normal(data[i].z0.values().len(), &mut rng);
                    forward_noise_with(&data[i].z0, t, schedule, &eps)
                })
                .collect::<Result<_>>()?;
            let loss = denoiser_step(&mut den, &mut adam, data, chunk, &noised, &steps)?;
            if !loss.is_finite() {
                return Err(XctError::Model(format!(
                    "denoiser loss became non-finite at step {}",
                    curve.steps.len() + 1
                )));
            }
            curve.steps.push(loss);
        }
        curve.push_epoch(first);
    }
    if !den.is_finite() {
        return Err(XctError::Model("denoiser weights became non-finite".into()));
    }
    Ok((den, curve))
}

fn denoiser_step(
    den: &mut Denoiser,
    adam: &mut Adam<f32>,
    data: &[DiffusionExample],
    chunk: &[usize],
    noised: &[LatentGrid],
    steps: &[usize],
) -> Result<f32> {
    let items: Vec<(&LatentGrid, &Condition)> =
        chunk.iter().zip(noised).map(|(&i, z)| (z, &data[i].cond)).collect();
    let x = den.input(&items)?;
    let mut target = Vec::new();
    for &i in chunk {
        target.extend_from_slice(data[i].z0.values());
    }
    let e = data[chunk[0]].z0.extent();
    let target = Tensor::new(&[chunk.len(), den.config.latent_dim, e.d, e.h, e.w], target)?;
    let mut tape = Tape::new();
    let p = den.store.bind(&mut tape);
    let y = den.forward(&mut tape, &p, x, steps)?;
    let target = tape.constant(target);
    let loss = tape.mse(y, target)?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    den.store.store_grads(&mut grads, &p)?;
    adam.step(&mut den.store)?;
    Ok(value)
}

/// Mean denoising loss over `data` at a fixed `t`, with seeded noise.
pub fn denoising_loss<P: X0Predictor + ?Sized>(
    predictor: &P,
    data: &[DiffusionExample],
    schedule: &NoiseSchedule,
    t: usize,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return invalid("empty evaluation set");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for ex in data {
        let eps = standard_normal(ex.z0.values().len(), &mut rng);
        let zt = forward_noise_with(&ex.z0, t, schedule, &eps)?;
        let g = predictor.predict(&zt, &ex.cond, t)?;
        total += g
            .values()
            .iter()
            .zip(ex.z0.values())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / g.values().len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Latent grid of the given shape filled from a closure over flat indices.
pub fn latent_from_fn(extent: Extent3, dim: usize, f: impl Fn(usize) -> f32) -> LatentGrid {
    LatentGrid::new(extent, dim, (0..extent.voxels() * dim).map(f).collect()).expect("shape")
}
