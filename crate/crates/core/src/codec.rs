//! Vector-quantized 3D autoencoders.
//!
//! The encoder halves every extent `stages` times (compression factor
//! `f = 2^stages`) and projects to `code_dim` channels; the decoder mirrors
//! it with stride-2 transposed convolutions. Continuous encoder outputs are
//! snapped to the nearest codebook entry before decoding.

use std::borrow::Cow;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xct_tensor::{checkpoint, Adam, AdamConfig, Bound, ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::{invalid, shape, Result, XctError};
use crate::geometry::{Extent3, Volume};
use crate::io::write_atomic;
use crate::nets::{Conv, Norm, Up};
use crate::train::LossCurve;

pub const COMMITMENT_BETA: f32 = 0.25;
const CONFIG_TENSOR: &str = "codec.config";
const CODEBOOK_TENSOR: &str = "codebook";
/// Encoder outputs kept around for dead-code refresh.
const REFRESH_POOL: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub base_channels: usize,
    pub stages: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            stages: 3,
            codebook_size: 64,
            code_dim: 4,
        }
    }
}

impl CodecConfig {
    pub fn factor(&self) -> usize {
        1 << self.stages
    }

    fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.stages > 6 {
            return invalid(format!("codec stages must be in 1..=6, got {}", self.stages));
        }
        if self.codebook_size < 2 {
            return invalid(format!("codebook needs K ≥ 2 entries, got {}", self.codebook_size));
        }
        if self.code_dim == 0 || self.base_channels == 0 || self.base_channels % crate::nets::GROUPS != 0 {
            return invalid(format!(
                "code dim must be ≥ 1 and base channels a multiple of {}, got {self:?}",
                crate::nets::GROUPS
            ));
        }
        Ok(())
    }

    /// Latent extent for a volume extent, or an error naming `f`.
    pub fn latent_extent(&self, e: Extent3) -> Result<Extent3> {
        let f = self.factor();
        if e.d % f != 0 || e.h % f != 0 || e.w % f != 0 || e.voxels() == 0 {
            return shape(
                "encode",
                format!("volume extents {:?} are not divisible by f={f}", e.as_array()),
            );
        }
        Ok(Extent3::new(e.d / f, e.h / f, e.w / f))
    }
}

/// A grid of `dim`-vectors, stored channel-first (`[dim, d, h, w]`).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    extent: Extent3,
    dim: usize,
    values: Vec<f32>,
    codes: Option<Vec<usize>>,
}

impl LatentGrid {
    pub fn new(extent: Extent3, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != extent.voxels() * dim {
            return shape(
                "latent",
                format!("{} values for {:?}×{dim}", values.len(), extent.as_array()),
            );
        }
        Ok(Self {
            extent,
            dim,
            values,
            codes: None,
        })
    }

    pub fn zeros(extent: Extent3, dim: usize) -> Self {
        Self {
            extent,
            dim,
            values: vec![0.0; extent.voxels() * dim],
            codes: None,
        }
    }

    pub fn extent(&self) -> Extent3 {
        self.extent
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn codes(&self) -> Option<&[usize]> {
        self.codes.as_deref()
    }

    pub fn positions(&self) -> usize {
        self.extent.voxels()
    }

    /// `[1, dim, d, h, w]`.
    pub fn to_tensor(&self) -> Tensor {
        let e = self.extent;
        Tensor::new(&[1, self.dim, e.d, e.h, e.w], self.values.clone()).expect("latent shape")
    }

    pub fn same_shape(&self, other: &LatentGrid) -> bool {
        self.extent == other.extent && self.dim == other.dim
    }

    /// Continuous values only; any code grid is dropped.
    pub fn map_values(&self, f: impl Fn(f32) -> f32) -> LatentGrid {
        LatentGrid {
            extent: self.extent,
            dim: self.dim,
            values: self.values.iter().map(|&v| f(v)).collect(),
            codes: None,
        }
    }

    pub fn l2_distance(&self, other: &LatentGrid) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Nearest-entry index per position of a channel-first block; ties go to
/// the lowest index.
pub fn nearest_codes(values: &[f32], dim: usize, codebook: &[f32]) -> Vec<usize> {
    let positions = values.len() / dim;
    let k = codebook.len() / dim;
    (0..positions)
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let mut d = 0.0f64;
                for j in 0..dim {
                    let diff = values[j * positions + p] as f64 - codebook[c * dim + j] as f64;
                    d += diff * diff;
                }
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Snaps every position of `latent` to its nearest entry of `codebook`
/// (`[K, n]`).
pub fn quantize(latent: &LatentGrid, codebook: &Tensor) -> Result<LatentGrid> {
    let cs = codebook.shape();
    if cs.len() != 2 || cs[1] != latent.dim {
        return shape(
            "quantize",
            format!("latent dim {} vs codebook shape {cs:?}", latent.dim),
        );
    }
    let codes = nearest_codes(&latent.values, latent.dim, codebook.data());
    let positions = latent.positions();
    let mut values = vec![0.0; latent.values.len()];
    for (p, &c) in codes.iter().enumerate() {
        for j in 0..latent.dim {
            values[j * positions + p] = codebook.data()[c * latent.dim + j];
        }
    }
    Ok(LatentGrid {
        extent: latent.extent,
        dim: latent.dim,
        values,
        codes: Some(codes),
    })
}

#[derive(Clone, Debug)]
pub struct VqAutoencoder {
    config: CodecConfig,
    store: ParamStore,
    enc: Vec<(Conv, Norm)>,
    enc_out: Conv,
    dec_in: (Conv, Norm),
    dec_up: Vec<(Up, Norm)>,
    dec_refine: (Conv, Norm),
    dec_out: Up,
    codebook: ParamId,
    latent_scale: f32,
}

/// Output of one training forward pass.
struct Forward {
    loss: Var,
    codes: Vec<usize>,
    encoded: Var,
}

impl VqAutoencoder {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ch = |i: usize| config.base_channels << i;
        let s = &mut store;

        let mut enc = Vec::new();
        for i in 0..config.stages {
            let c_in = if i == 0 { 1 } else { ch(i - 1) };
            enc.push((
                Conv::down(s, &format!("enc.{i}"), c_in, ch(i), &mut rng)?,
                Norm::new(s, &format!("enc.{i}.norm"), ch(i))?,
            ));
        }
        let top = ch(config.stages - 1);
        let enc_out = Conv::same(s, "enc.out", top, config.code_dim, 1, &mut rng)?;
        let dec_in = (
            Conv::same(s, "dec.in", config.code_dim, top, 3, &mut rng)?,
            Norm::new(s, "dec.in.norm", top)?,
        );
        let mut dec_up = Vec::new();
        for i in (1..config.stages).rev() {
            dec_up.push((
                Up::new(s, &format!("dec.up{i}"), ch(i), ch(i - 1), &mut rng)?,
                Norm::new(s, &format!("dec.up{i}.norm"), ch(i - 1))?,
            ));
        }
        let dec_refine = (
            Conv::same(s, "dec.refine", ch(0), ch(0), 3, &mut rng)?,
            Norm::new(s, "dec.refine.norm", ch(0))?,
        );
        let dec_out = Up::new(s, "dec.out", ch(0), 1, &mut rng)?;
        let bound = 1.0 / config.codebook_size as f64;
        let codebook = s.add(
            CODEBOOK_TENSOR,
            Tensor::uniform(&[config.codebook_size, config.code_dim], bound, &mut rng),
        )?;
        Ok(Self {
            config,
            store,
            enc,
            enc_out,
            dec_in,
            dec_up,
            dec_refine,
            dec_out,
            codebook,
            latent_scale: 1.0,
        })
    }

    pub fn config(&self) -> CodecConfig {
        self.config
    }

    pub fn factor(&self) -> usize {
        self.config.factor()
    }

    pub fn codebook(&self) -> &Tensor {
        self.store.get(self.codebook)
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Spread of trained latents, used to bring them to unit scale.
    pub fn latent_scale(&self) -> f32 {
        self.latent_scale
    }

    pub fn set_latent_scale(&mut self, scale: f32) -> Result<()> {
        if !(scale.is_finite() && scale > 0.0) {
            return invalid(format!("latent scale must be positive, got {scale}"));
        }
        self.latent_scale = scale;
        Ok(())
    }

    /// Quantized latent divided by [`latent_scale`](Self::latent_scale).
    pub fn encode_scaled(&self, volume: &Volume) -> Result<LatentGrid> {
        let s = self.latent_scale;
        Ok(self.encode(volume)?.map_values(|v| v / s))
    }

    /// Inverse of the scaling in [`encode_scaled`](Self::encode_scaled), then [`decode`](Self::decode).
    pub fn decode_scaled(&self, latent: &LatentGrid) -> Result<Volume> {
        let s = self.latent_scale;
        self.decode(&latent.map_values(|v| v * s))
    }

    pub fn is_finite(&self) -> bool {
        self.store.all_finite()
    }

    fn encoder(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (conv, norm) in &self.enc {
            h = conv.forward(tape, p, h)?;
            h = norm.forward_act(tape, p, h)?;
        }
        self.enc_out.forward(tape, p, h)
    }

    fn decoder(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        let h = self.dec_in.0.forward(tape, p, z)?;
        let mut h = self.dec_in.1.forward_act(tape, p, h)?;
        for (up, norm) in &self.dec_up {
            h = up.forward(tape, p, h)?;
            h = norm.forward_act(tape, p, h)?;
        }
        h = self.dec_refine.0.forward(tape, p, h)?;
        h = self.dec_refine.1.forward_act(tape, p, h)?;
        self.dec_out.forward(tape, p, h)
    }

    fn check_volume(&self, v: &Volume) -> Result<Extent3> {
        self.config.latent_extent(v.extent())
    }

    /// Continuous (pre-quantization) encoder output.
    pub fn encode_continuous(&self, volume: &Volume) -> Result<LatentGrid> {
        let le = self.check_volume(volume)?;
        let e = volume.extent();
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::new(&[1, 1, e.d, e.h, e.w], volume.data().to_vec())?);
        let z = self.encoder(&mut tape, &p, x)?;
        LatentGrid::new(le, self.config.code_dim, tape.value(z).data().to_vec())
    }

    /// Quantized latent of `volume`.
    pub fn encode(&self, volume: &Volume) -> Result<LatentGrid> {
        quantize(&self.encode_continuous(volume)?, self.codebook())
    }

    /// Decodes after snapping `latent` to the codebook; output clamped to [0, 1].
    pub fn decode(&self, latent: &LatentGrid) -> Result<Volume> {
        self.decode_raw(latent).map(|v| v.clamped(0.0, 1.0))
    }

    /// As [`decode`](Self::decode) without the clamp.
    pub fn decode_raw(&self, latent: &LatentGrid) -> Result<Volume> {
        if latent.dim != self.config.code_dim {
            return shape(
                "decode",
                format!("latent dim {} vs codec dim {}", latent.dim, self.config.code_dim),
            );
        }
        let q = quantize(latent, self.codebook())?;
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let z = tape.constant(q.to_tensor());
        let y = self.decoder(&mut tape, &p, z)?;
        let f = self.factor();
        let le = latent.extent;
        Volume::new(Extent3::new(le.d * f, le.h * f, le.w * f), tape.value(y).data().to_vec())
    }

    pub fn round_trip(&self, volume: &Volume) -> Result<Volume> {
        self.decode(&self.encode(volume)?)
    }

    fn forward_train(&self, tape: &mut Tape, p: &Bound, batch: Tensor) -> Result<Forward> {
        let shape = batch.shape().to_vec();
        let x = tape.constant(batch);
        let ze = self.encoder(tape, p, x)?;
        let zs = tape.shape(ze).to_vec();
        let codes = nearest_per_sample(tape.value(ze).data(), &zs, self.codebook().data());
        let mut grid = vec![zs[0]];
        grid.extend_from_slice(&zs[2..]);
        let zq = tape.embedding(p[self.codebook], &codes, &grid)?;
        let zst = tape.straight_through(ze, zq)?;
        let recon = self.decoder(tape, p, zst)?;
        debug_assert_eq!(tape.shape(recon), shape.as_slice());
        let rec_loss = tape.mse(recon, x)?;
        let ze_stop = tape.detach(ze);
        let zq_stop = tape.detach(zq);
        let codebook_loss = tape.mse(ze_stop, zq)?;
        let commit = tape.mse(ze, zq_stop)?;
        let commit = tape.affine(commit, COMMITMENT_BETA, 0.0);
        let loss = tape.add(rec_loss, codebook_loss)?;
        let loss = tape.add(loss, commit)?;
        Ok(Forward {
            loss,
            codes,
            encoded: ze,
        })
    }

    /// Training objective on one batch, without updating anything.
    pub fn loss(&self, volumes: &[&Volume]) -> Result<f32> {
        let batch = stack(volumes)?;
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let f = self.forward_train(&mut tape, &p, batch)?;
        Ok(tape.value(f.loss).data()[0])
    }

    fn meta(&self) -> Tensor {
        let c = self.config;
        let v = [c.base_channels, c.stages, c.codebook_size, c.code_dim].map(|v| v as f32);
        let mut data = v.to_vec();
        data.push(self.latent_scale);
        Tensor::new(&[5], data).expect("meta shape")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = self.meta();
        let bytes = checkpoint::encode(self.store.iter().chain([(CONFIG_TENSOR, &meta)]))?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let fmt = |detail: String| XctError::Format {
            path: path.display().to_string(),
            detail,
        };
        let bytes = fs::read(path).map_err(|e| fmt(e.to_string()))?;
        let named = checkpoint::decode::<f32>(&bytes).map_err(|e| fmt(e.to_string()))?;
        Self::from_named(named).map_err(|e| fmt(e.to_string()))
    }

    pub fn from_named(mut named: Vec<(String, Tensor)>) -> Result<Self> {
        let Some(pos) = named.iter().position(|(n, _)| n == CONFIG_TENSOR) else {
            return Err(XctError::Model(format!("not a codec checkpoint (no `{CONFIG_TENSOR}`)")));
        };
        let meta = named.remove(pos).1;
        let m = meta.data();
        if m.len() != 5 {
            return Err(XctError::Model("malformed codec config tensor".into()));
        }
        let config = CodecConfig {
            base_channels: m[0] as usize,
            stages: m[1] as usize,
            codebook_size: m[2] as usize,
            code_dim: m[3] as usize,
        };
        let mut ae = Self::new(config, 0)?;
        ae.store.load_named(named)?;
        ae.set_latent_scale(m[4])?;
        if !ae.is_finite() {
            return Err(XctError::Model("codec weights contain non-finite values".into()));
        }
        Ok(ae)
    }
}

fn nearest_per_sample(values: &[f32], shape: &[usize], codebook: &[f32]) -> Vec<usize> {
    let n = shape[0];
    let per = values.len() / n;
    values
        .chunks(per)
        .flat_map(|block| nearest_codes(block, shape[1], codebook))
        .collect()
}

/// `[N, 1, D, H, W]` batch of equally sized volumes.
pub fn stack(volumes: &[&Volume]) -> Result<Tensor> {
    let Some(first) = volumes.first() else {
        return invalid("empty batch");
    };
    let e = first.extent();
    let mut data = Vec::with_capacity(volumes.len() * e.voxels());
    for v in volumes {
        if v.extent() != e {
            return shape(
                "batch",
                format!("volume {:?} vs {:?}", v.extent().as_array(), e.as_array()),
            );
        }
        data.extend_from_slice(v.data());
    }
    Ok(Tensor::new(&[volumes.len(), 1, e.d, e.h, e.w], data)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 3e-4,
            batch_size: 2,
            seed: 0,
        }
    }
}

/// Root-mean-square of the quantized latents of `volumes` (1 if all zero).
pub fn latent_spread(ae: &VqAutoencoder, volumes: &[Volume]) -> Result<f32> {
    spread_of(ae, volumes.iter())
}

fn spread_of<'a>(ae: &VqAutoencoder, volumes: impl Iterator<Item = &'a Volume>) -> Result<f32> {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for v in volumes {
        let z = ae.encode(v)?;
        sum += z.values().iter().map(|&x| (x as f64).powi(2)).sum::<f64>();
        n += z.values().len();
    }
    let rms = (sum / n.max(1) as f64).sqrt() as f32;
    Ok(if rms > 1e-6 { rms } else { 1.0 })
}

/// Distinct codes used when encoding `volumes`.
pub fn codebook_usage(ae: &VqAutoencoder, volumes: &[Volume]) -> Result<usize> {
    let mut seen = vec![false; ae.config.codebook_size];
    for v in volumes {
        for &c in ae.encode(v)?.codes().unwrap_or(&[]) {
            seen[c] = true;
        }
    }
    Ok(seen.iter().filter(|&&s| s).count())
}

pub fn round_trip_mse(ae: &VqAutoencoder, volumes: &[Volume]) -> Result<f64> {
    if volumes.is_empty() {
        return invalid("round-trip MSE needs at least one volume");
    }
    let mut total = 0.0;
    for v in volumes {
        let r = ae.round_trip(v)?;
        total += r
            .data()
            .iter()
            .zip(v.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / v.data().len() as f64;
    }
    Ok(total / volumes.len() as f64)
}

/// Resets each codebook entry flagged in `unused` to a random pooled
/// encoder output.
fn refresh_codes<R: Rng>(ae: &mut VqAutoencoder, unused: &[bool], pool: &[Vec<f32>], rng: &mut R) -> usize {
    if pool.is_empty() {
        return 0;
    }
    let dim = ae.config.code_dim;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(rng);
    let mut next = order.into_iter().cycle();
    let cb = ae.store.get_mut(ae.codebook);
    let mut reset = 0;
    for (k, &dead) in unused.iter().enumerate() {
        if dead {
            let src = &pool[next.next().expect("non-empty pool")];
            cb.data_mut()[k * dim..(k + 1) * dim].copy_from_slice(src);
            reset += 1;
        }
    }
    reset
}

fn pool_vectors(pool: &mut Vec<Vec<f32>>, values: &[f32], shape: &[usize], cursor: &mut usize) {
    let (n, dim) = (shape[0], shape[1]);
    let positions: usize = shape[2..].iter().product();
    for b in 0..n {
        let block = &values[b * dim * positions..(b + 1) * dim * positions];
        for p in 0..positions {
            let v: Vec<f32> = (0..dim).map(|j| block[j * positions + p]).collect();
            if pool.len() < REFRESH_POOL {
                pool.push(v);
            } else {
                pool[*cursor % REFRESH_POOL] = v;
            }
            *cursor += 1;
        }
    }
}

/// Trains `ae` on `volumes` with the VQ objective
/// `‖D(q(E(V))) − V‖² + ‖sg(E(V)) − z_q‖² + β‖E(V) − sg(z_q)‖²`.
///
/// Entries that no initial encoder output maps to, and afterwards any entry
/// unused for a whole epoch, are reset to a random recent encoder output.
pub fn train_codec(
    ae: VqAutoencoder,
    volumes: &[Volume],
    config: &CodecTrainConfig,
) -> Result<(VqAutoencoder, LossCurve)> {
    train_codec_with(ae, volumes.len(), 1, |i, _| Ok(Cow::Borrowed(&volumes[i])), config)
}

/// As [`train_codec`] over `items` training items with `alternatives`
/// inputs each, built on demand by `make(item, alternative)`. Every epoch
/// draws one alternative per item.
pub fn train_codec_with<'a>(
    mut ae: VqAutoencoder,
    items: usize,
    alternatives: usize,
    make: impl Fn(usize, usize) -> Result<Cow<'a, Volume>>,
    config: &CodecTrainConfig,
) -> Result<(VqAutoencoder, LossCurve)> {
    if items == 0 || alternatives == 0 {
        return invalid("codec training needs a non-empty dataset");
    }
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return invalid(format!("batch size must be ≥ 1 and lr > 0, got {config:?}"));
    }
    let first = make(0, 0)?;
    ae.check_volume(&first)?;
    let mut curve = LossCurve::default();
    if config.epochs == 0 {
        return Ok((ae, curve));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&ae.store, AdamConfig::with_lr(config.lr));
    let mut order: Vec<usize> = (0..items).collect();

    let mut pool = Vec::new();
    let mut cursor = 0;
    let per = ae.positions_per(&first).max(1);
    drop(first);
    for i in 0..items.min(REFRESH_POOL / per + 1) {
        let z = ae.encode_continuous(&*make(i, 0)?)?;
        let e = z.extent;
        pool_vectors(&mut pool, z.values(), &[1, z.dim, e.d, e.h, e.w], &mut cursor);
    }
    let mut unused = vec![true; ae.config.codebook_size];
    let dim = ae.config.code_dim;
    let columns: Vec<f32> = (0..dim)
        .flat_map(|j| pool.iter().map(move |v| v[j]))
        .collect();
    for c in nearest_codes(&columns, dim, ae.codebook().data()) {
        unused[c] = false;
    }
    refresh_codes(&mut ae, &unused, &pool, &mut rng);

    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let picks: Vec<usize> = (0..items).map(|_| rng.random_range(0..alternatives)).collect();
        let first_step = curve.steps.len();
        let mut used = vec![false; ae.config.codebook_size];
        for chunk in order.chunks(config.batch_size) {
            let owned = chunk
                .iter()
                .map(|&i| {
                    let v = make(i, picks[i])?;
                    ae.check_volume(&v)?;
                    Ok(v)
                })
                .collect::<Result<Vec<_>>>()?;
            let batch: Vec<&Volume> = owned.iter().map(|v| v.as_ref()).collect();
            let batch = stack(&batch)?;
            let mut tape = Tape::new();
            let p = ae.store.bind(&mut tape);
            let f = ae.forward_train(&mut tape, &p, batch)?;
            let loss = tape.value(f.loss).data()[0];
            if !loss.is_finite() {
                return Err(XctError::Model(format!(
                    "codec loss became non-finite at step {}",
                    curve.steps.len() + 1
                )));
            }
            for &c in &f.codes {
                used[c] = true;
            }
            let zs = tape.shape(f.encoded).to_vec();
            pool_vectors(&mut pool, tape.value(f.encoded).data(), &zs, &mut cursor);
            let mut grads = tape.backward(f.loss)?;
            ae.store.store_grads(&mut grads, &p)?;
            adam.step(&mut ae.store)?;
            curve.steps.push(loss);
        }
        curve.push_epoch(first_step);
        let unused: Vec<bool> = used.iter().map(|u| !u).collect();
        refresh_codes(&mut ae, &unused, &pool, &mut rng);
    }
    if !ae.is_finite() {
        return Err(XctError::Model("codec weights became non-finite".into()));
    }
    let probe = (0..items)
        .map(|i| make(i, i % alternatives))
        .collect::<Result<Vec<_>>>()?;
    let scale = spread_of(&ae, probe.iter().map(|v| v.as_ref()))?;
    ae.set_latent_scale(scale)?;
    Ok((ae, curve))
}

impl VqAutoencoder {
    fn positions_per(&self, v: &Volume) -> usize {
        self.config
            .latent_extent(v.extent())
            .map(|e| e.voxels())
            .unwrap_or(1)
    }
}
