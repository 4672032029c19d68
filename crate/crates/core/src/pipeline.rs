//! Dual-view guided reconstruction: view-guided encoding, the latent
//! mapper, new-view synthesis, diffusion sampling, metrics and the
//! experiment harnesses.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use xct_tensor::{checkpoint, Adam, AdamConfig, ParamStore, Tape, Tensor};

use crate::codec::{train_codec_with, CodecConfig, CodecTrainConfig, LatentGrid, VqAutoencoder};
use crate::diffusion::{
    cosine_schedule, sample, train_denoiser, Condition, Denoiser, DenoiserConfig, DenoiserTrainConfig,
    DiffusionExample, NoiseSchedule,
};
use crate::error::{invalid, shape, Result, XctError};
use crate::geometry::{
    back_project_multi, forward_project, uniform_view_angles, Extent3, Projection, ViewParams, ViewRange, Volume,
};
use crate::io::write_atomic;
use crate::nets::UNet;
use crate::phantom::Sample;
use crate::train::LossCurve;

/// New views synthesized by default for a given input set.
pub fn default_new_views(inputs: &[f64]) -> Vec<f64> {
    match inputs.len() {
        1 => vec![90.0],
        2 => vec![45.0],
        3 => vec![22.5],
        _ => Vec::new(),
    }
}

/// Two new views per input set.
pub fn two_new_views(inputs: &[f64]) -> Vec<f64> {
    match inputs.len() {
        1 => vec![45.0, 90.0],
        _ => vec![22.5, 67.5],
    }
}

/// Multi-view back projection rescaled by `|L|·Δp / view count`, which maps
/// min-max normalized images back to the `[0, 1]` range.
pub fn bp_volume(images: &[Projection]) -> Result<Volume> {
    let v = back_project_multi(images)?;
    let view = images[0].view();
    let factor = view.ray_length() / images.len() as f64;
    Ok(v.scaled(factor as f32))
}

/// Geometry-agnostic lift: every image is back projected as if it were
/// the AP view, ignoring its own view parameters.
pub fn direct_volume(images: &[Projection]) -> Result<Volume> {
    let ap: Vec<Projection> = images
        .iter()
        .map(|p| {
            let v = p.view();
            let view = ViewParams::with_sampling(0.0, v.grid(), v.delta_p(), v.samples_per_ray())?;
            Projection::new(view, p.data().to_vec())
        })
        .collect::<Result<_>>()?;
    bp_volume(&ap)
}

/// How images are lifted to the codec's input volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Encoding {
    /// Back projection along each image's own rays.
    ViewGuided,
    /// Every image treated as an AP view.
    Direct,
}

/// Frozen bp-codec composed with back projection.
#[derive(Clone, Copy, Debug)]
pub struct VpgeEncoder<'a> {
    pub codec: &'a VqAutoencoder,
    pub grid: Extent3,
    pub encoding: Encoding,
}

impl<'a> VpgeEncoder<'a> {
    pub fn new(codec: &'a VqAutoencoder, grid: Extent3) -> Self {
        Self {
            codec,
            grid,
            encoding: Encoding::ViewGuided,
        }
    }

    pub fn lift(&self, images: &[Projection]) -> Result<Volume> {
        if images.is_empty() {
            return Ok(Volume::zeros(self.grid));
        }
        for p in images {
            if p.view().grid() != self.grid {
                return shape(
                    "vpge_encode",
                    format!("image grid {:?} vs encoder grid {:?}", p.view().grid().as_array(), self.grid.as_array()),
                );
            }
        }
        match self.encoding {
            Encoding::ViewGuided => bp_volume(images),
            Encoding::Direct => direct_volume(images),
        }
    }
}

/// `I → V_bp → q(E_bp(V_bp))`.
pub fn vpge_encode(images: &[Projection], encoder: &VpgeEncoder) -> Result<LatentGrid> {
    if !encoder.codec.is_finite() {
        return Err(XctError::Model("bp codec has non-finite weights".into()));
    }
    encoder.codec.encode(&encoder.lift(images)?)
}

/// As [`vpge_encode`], divided by the codec's latent scale.
pub fn vpge_encode_scaled(images: &[Projection], encoder: &VpgeEncoder) -> Result<LatentGrid> {
    let s = encoder.codec.latent_scale();
    Ok(vpge_encode(images, encoder)?.map_values(|v| v / s))
}

const MAPPER_CONFIG: &str = "mapper.config";

/// `G_z`: bp-latent to CT-latent regression network.
#[derive(Clone, Debug)]
pub struct LatentMapper {
    store: ParamStore,
    net: UNet,
    latent_dim: usize,
    base_channels: usize,
}

impl LatentMapper {
    pub fn new(latent_dim: usize, base_channels: usize, seed: u64) -> Result<Self> {
        if latent_dim == 0 || base_channels == 0 || base_channels % crate::nets::GROUPS != 0 {
            return invalid(format!("invalid mapper widths {latent_dim}/{base_channels}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, "gz", latent_dim, latent_dim, base_channels, false, &mut rng)?;
        Ok(Self {
            store,
            net,
            latent_dim,
            base_channels,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn map(&self, z: &LatentGrid) -> Result<LatentGrid> {
        if z.dim() != self.latent_dim {
            return shape("latent_mapper", format!("latent dim {} vs mapper dim {}", z.dim(), self.latent_dim));
        }
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let x = tape.constant(z.to_tensor());
        let y = self.net.forward(&mut tape, &p, x, None)?;
        LatentGrid::new(z.extent(), z.dim(), tape.value(y).data().to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Tensor::new(&[2], vec![self.latent_dim as f32, self.base_channels as f32])?;
        write_atomic(path, &checkpoint::encode(self.store.iter().chain([(MAPPER_CONFIG, &meta)]))?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let fmt = |detail: String| XctError::Format {
            path: path.display().to_string(),
            detail,
        };
        let bytes = fs::read(path).map_err(|e| fmt(e.to_string()))?;
        let mut named = checkpoint::decode::<f32>(&bytes).map_err(|e| fmt(e.to_string()))?;
        let Some(pos) = named.iter().position(|(n, _)| n == MAPPER_CONFIG) else {
            return Err(fmt(format!("not a mapper checkpoint (no `{MAPPER_CONFIG}`)")));
        };
        let m = named.remove(pos).1;
        if m.numel() != 2 {
            return Err(fmt("malformed mapper config tensor".into()));
        }
        let mut mapper = Self::new(m.data()[0] as usize, m.data()[1] as usize, 0)?;
        mapper.store.load_named(named).map_err(|e| fmt(e.to_string()))?;
        if !mapper.store.all_finite() {
            return Err(XctError::Model(format!("{}: non-finite mapper weights", path.display())));
        }
        Ok(mapper)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapperTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MapperTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 3e-4,
            batch_size: 2,
            seed: 0,
        }
    }
}

/// Minimizes `‖G_z(z_in) − z_ct‖²` over `(z_in, z_ct)` pairs.
pub fn train_latent_mapper(
    mut mapper: LatentMapper,
    pairs: &[(LatentGrid, LatentGrid)],
    config: &MapperTrainConfig,
) -> Result<(LatentMapper, LossCurve)> {
    if pairs.is_empty() {
        return invalid("mapper training needs a non-empty dataset");
    }
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return invalid(format!("batch size must be ≥ 1 and lr > 0, got {config:?}"));
    }
    let first = &pairs[0].0;
    for (a, b) in pairs {
        if !a.same_shape(first) || !b.same_shape(first) {
            return shape("train_latent_mapper", "all latents must share one shape");
        }
    }
    let mut curve = LossCurve::default();
    if config.epochs == 0 {
        return Ok((mapper, curve));
    }
    let e = first.extent();
    let n = first.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&mapper.store, AdamConfig::with_lr(config.lr));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let start = curve.steps.len();
        for chunk in order.chunks(config.batch_size) {
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for &i in chunk {
                xs.extend_from_slice(pairs[i].0.values());
                ys.extend_from_slice(pairs[i].1.values());
            }
            let dims = [chunk.len(), n, e.d, e.h, e.w];
            let mut tape = Tape::new();
            let p = mapper.store.bind(&mut tape);
            let x = tape.constant(Tensor::new(&dims, xs)?);
            let y = tape.constant(Tensor::new(&dims, ys)?);
            let out = mapper.net.forward(&mut tape, &p, x, None)?;
            let loss = tape.mse(out, y)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(XctError::Model("mapper loss became non-finite".into()));
            }
            let mut grads = tape.backward(loss)?;
            mapper.store.store_grads(&mut grads, &p)?;
            adam.step(&mut mapper.store)?;
            curve.steps.push(value);
        }
        curve.push_epoch(start);
    }
    Ok((mapper, curve))
}

/// Frozen models needed to reconstruct one configuration.
#[derive(Clone, Copy, Debug)]
pub struct Models<'a> {
    pub ct_codec: &'a VqAutoencoder,
    pub bp_codec: &'a VqAutoencoder,
    /// Needed only for new-view synthesis.
    pub mapper: Option<&'a LatentMapper>,
    pub denoiser: &'a Denoiser,
    pub schedule: &'a NoiseSchedule,
}

/// Models used by new-view synthesis.
#[derive(Clone, Copy, Debug)]
pub struct SynthesisModels<'a> {
    pub ct_codec: &'a VqAutoencoder,
    pub bp_codec: &'a VqAutoencoder,
    pub mapper: Option<&'a LatentMapper>,
}

impl<'a> From<Models<'a>> for SynthesisModels<'a> {
    fn from(m: Models<'a>) -> Self {
        Self {
            ct_codec: m.ct_codec,
            bp_codec: m.bp_codec,
            mapper: m.mapper,
        }
    }
}

fn grid_of(images: &[Projection]) -> Result<Extent3> {
    match images.first() {
        Some(p) => Ok(p.view().grid()),
        None => invalid("at least one input image is required"),
    }
}

/// `I_in → V_bp → z_in → G_z → z_ct → D_ct → V_ct^init → FP → I_new`.
pub fn synthesize_new_view(
    images: &[Projection],
    new_angle: f64,
    models: SynthesisModels,
) -> Result<(Projection, Volume)> {
    let grid = grid_of(images)?;
    let enc = VpgeEncoder::new(models.bp_codec, grid);
    let Some(mapper) = models.mapper else {
        return Err(XctError::Model("new-view synthesis needs a trained latent mapper".into()));
    };
    let z_in = vpge_encode_scaled(images, &enc)?;
    let z_ct = mapper.map(&z_in)?;
    let init = models.ct_codec.decode_scaled(&z_ct)?;
    if init.extent() != grid {
        return shape(
            "synthesize_new_view",
            format!("decoded volume {:?} vs input grid {:?}", init.extent().as_array(), grid.as_array()),
        );
    }
    let v = images[0].view();
    let view = ViewParams::with_sampling(new_angle, grid, v.delta_p(), v.samples_per_ray())?;
    let img = forward_project(&init, &view)?.normalized();
    Ok((img, init))
}

/// Diffusion condition for `images` under the given encoding and new views.
pub fn build_condition(
    images: &[Projection],
    models: SynthesisModels,
    encoding: Encoding,
    new_views: &[f64],
) -> Result<Condition> {
    let grid = grid_of(images)?;
    let enc = VpgeEncoder {
        codec: models.bp_codec,
        grid,
        encoding,
    };
    let z_in = vpge_encode_scaled(images, &enc)?;
    let z_new = if new_views.is_empty() {
        None
    } else {
        let synth: Vec<Projection> = new_views
            .iter()
            .map(|&a| synthesize_new_view(images, a, models).map(|(p, _)| p))
            .collect::<Result<_>>()?;
        Some(vpge_encode_scaled(&synth, &enc)?)
    };
    Condition::new(z_in, z_new)
}

/// Reconstruction with explicit encoding and new-view angles (empty for none).
pub fn reconstruct_with(
    images: &[Projection],
    models: Models,
    encoding: Encoding,
    new_views: &[f64],
    seed: u64,
) -> Result<Volume> {
    let cond = build_condition(images, models.into(), encoding, new_views)?;
    let z0 = sample(models.denoiser, &cond, models.schedule, seed, false)?;
    let v = models.ct_codec.decode_scaled(&z0)?;
    if v.data().iter().any(|x| !x.is_finite()) {
        return Err(XctError::Model("reconstruction contains non-finite voxels".into()));
    }
    Ok(v)
}

/// View-guided reconstruction; `use_new_view = false` is the input-only arm.
pub fn reconstruct(
    images: &[Projection],
    models: Models,
    use_new_view: bool,
    new_angles: &[f64],
    seed: u64,
) -> Result<Volume> {
    let new_views = if use_new_view { new_angles } else { &[] };
    reconstruct_with(images, models, Encoding::ViewGuided, new_views, seed)
}

fn check_pair(stage: &'static str, a: &Volume, b: &Volume) -> Result<()> {
    if a.extent() != b.extent() {
        return shape(stage, format!("{:?} vs {:?}", a.extent().as_array(), b.extent().as_array()));
    }
    Ok(())
}

/// PSNR in dB with unit data range; `f64::INFINITY` for identical volumes.
pub fn psnr(a: &Volume, b: &Volume) -> Result<f64> {
    check_pair("psnr", a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((*x as f64) - (*y as f64)).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, x) in w.iter_mut().enumerate() {
        *x = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|x| x / s)
}

/// Separable 3D weighted average over every fully-inside window.
fn window_filter(x: &[f64], e: Extent3, taps: &[f64; SSIM_WINDOW]) -> (Vec<f64>, [usize; 3]) {
    let k = SSIM_WINDOW;
    let (d, h, w) = (e.d, e.h, e.w);
    let (od, oh, ow) = (d + 1 - k, h + 1 - k, w + 1 - k);
    let mut a = vec![0.0; d * h * ow];
    for i in 0..d * h {
        for j in 0..ow {
            a[i * ow + j] = (0..k).map(|t| taps[t] * x[i * w + j + t]).sum();
        }
    }
    let mut b = vec![0.0; d * oh * ow];
    for z in 0..d {
        for i in 0..oh {
            for j in 0..ow {
                b[(z * oh + i) * ow + j] = (0..k).map(|t| taps[t] * a[(z * h + i + t) * ow + j]).sum();
            }
        }
    }
    let mut c = vec![0.0; od * oh * ow];
    for z in 0..od {
        for i in 0..oh * ow {
            c[z * oh * ow + i] = (0..k).map(|t| taps[t] * b[(z + t) * oh * ow + i]).sum();
        }
    }
    (c, [od, oh, ow])
}

/// Mean local SSIM with a 7³ Gaussian window (σ = 1.5), `K1 = 0.01`,
/// `K2 = 0.03`, unit data range, over all windows fully inside the volume.
pub fn ssim(a: &Volume, b: &Volume) -> Result<f64> {
    check_pair("ssim", a, b)?;
    let e = a.extent();
    if e.d < SSIM_WINDOW || e.h < SSIM_WINDOW || e.w < SSIM_WINDOW {
        return shape("ssim", format!("extents {:?} smaller than the {SSIM_WINDOW}³ window", e.as_array()));
    }
    let taps = gaussian_taps();
    let xa: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let xb: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let (ma, _) = window_filter(&xa, e, &taps);
    let (mb, _) = window_filter(&xb, e, &taps);
    let (eaa, _) = window_filter(&prod(&xa, &xa), e, &taps);
    let (ebb, _) = window_filter(&prod(&xb, &xb), e, &taps);
    let (eab, _) = window_filter(&prod(&xa, &xb), e, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..ma.len() {
        let (pa, pb) = (ma[i], mb[i]);
        let saa = eaa[i] - pa * pa;
        let sbb = ebb[i] - pb * pb;
        let sab = eab[i] - pa * pb;
        let num = (2.0 * pa * pb + c1) * (2.0 * sab + c2);
        let den = (pa * pa + pb * pb + c1) * (saa + sbb + c2);
        total += num / den;
    }
    Ok(total / ma.len() as f64)
}

/// Pearson correlation of two equally sized images.
pub fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().map(|&x| x as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&x| x as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (*x as f64 - ma, *y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Ablation variants: whether view-guided encoding and new-view guidance are used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    Base,
    NewView,
    Vpge,
    Dvg,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::NewView, Variant::Vpge, Variant::Dvg];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::NewView => "newview",
            Variant::Vpge => "vpge",
            Variant::Dvg => "dvg",
        }
    }

    pub fn encoding(self) -> Encoding {
        match self {
            Variant::Base | Variant::NewView => Encoding::Direct,
            Variant::Vpge | Variant::Dvg => Encoding::ViewGuided,
        }
    }

    pub fn uses_new_views(self) -> bool {
        matches!(self, Variant::NewView | Variant::Dvg)
    }
}

/// One trainable configuration: a variant with its input and new-view angles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub variant: Variant,
    pub inputs: Vec<f64>,
    pub new_views: Vec<f64>,
}

fn angle_list(angles: &[f64]) -> String {
    angles.iter().map(|a| format!("{a}")).collect::<Vec<_>>().join("+")
}

impl Arm {
    pub fn new(variant: Variant, inputs: Vec<f64>, new_views: Vec<f64>) -> Result<Self> {
        if inputs.is_empty() {
            return invalid("an arm needs at least one input view");
        }
        if variant.uses_new_views() == new_views.is_empty() {
            return invalid(format!(
                "variant `{}` {} new views, got {:?}",
                variant.name(),
                if variant.uses_new_views() { "needs" } else { "takes no" },
                new_views
            ));
        }
        Ok(Self {
            variant,
            inputs,
            new_views,
        })
    }

    /// Stable identifier, also used in checkpoint file names.
    pub fn name(&self) -> String {
        let mut s = format!("{}_in{}", self.variant.name(), angle_list(&self.inputs));
        if !self.new_views.is_empty() {
            s.push_str(&format!("_new{}", angle_list(&self.new_views)));
        }
        s
    }

    pub fn denoiser_file(&self) -> String {
        format!("denoiser_{}.xctw", self.name())
    }
}

/// `(label, arm)` pairs of a view-count sweep; new-view synthesis is off.
pub fn sweep_arms(counts: &[usize], ranges: &[ViewRange]) -> Result<Vec<(String, Arm)>> {
    let mut out = Vec::new();
    for &r in ranges {
        for &c in counts {
            let arm = Arm::new(Variant::Vpge, uniform_view_angles(c, r)?, Vec::new())?;
            out.push((format!("r{}_n{c}", r.degrees()), arm));
        }
    }
    Ok(out)
}

/// Variant × {single, biplanar} × {0, 1, 2} new views, as applicable.
pub fn ablation_arms() -> Vec<(String, Arm)> {
    let mut out = Vec::new();
    for (label, inputs) in [("single", vec![0.0]), ("biplanar", vec![0.0, 90.0])] {
        for v in Variant::ALL {
            let news: Vec<Vec<f64>> = if v.uses_new_views() {
                vec![default_new_views(&inputs), two_new_views(&inputs)]
            } else {
                vec![Vec::new()]
            };
            for nv in news {
                let k = nv.len();
                let arm = Arm::new(v, inputs.clone(), nv).expect("valid ablation arm");
                out.push((format!("{}_{label}_new{k}", v.name()), arm));
            }
        }
    }
    out
}

/// New-view angles tried for a single AP input.
pub const NEW_VIEW_ANGLES: [f64; 6] = [10.0, 30.0, 45.0, 60.0, 90.0, 120.0];

/// Single AP input with one synthesized view at each of [`NEW_VIEW_ANGLES`].
pub fn angle_arms() -> Vec<(String, Arm)> {
    NEW_VIEW_ANGLES
        .iter()
        .map(|&a| {
            let arm = Arm::new(Variant::Dvg, vec![0.0], vec![a]).expect("valid angle arm");
            (format!("new{a}"), arm)
        })
        .collect()
}

/// Per-stage seed derived from the experiment seed.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    stage
        .bytes()
        .fold(seed ^ 0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn same_angle(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

/// Projections of `sample` at `angles`: stored ones where available, others
/// rendered from the volume with the sample's noise level.
pub fn views_for(sample: &Sample, angles: &[f64]) -> Result<Vec<Projection>> {
    let grid = sample.volume.extent();
    angles
        .iter()
        .map(|&a| {
            if let Some(p) = sample.projections.iter().find(|p| same_angle(p.view().angle_deg(), a)) {
                return Ok(p.clone());
            }
            let clean = forward_project(&sample.volume, &ViewParams::new(a, grid)?)?.normalized();
            if sample.noise_sigma == 0.0 {
                return Ok(clean);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(sample.seed ^ a.to_bits().rotate_left(17));
            rng.set_stream(2);
            let normal = Normal::new(0.0, sample.noise_sigma)
                .map_err(|e| XctError::Invalid(format!("noise sigma: {e}")))?;
            let data = clean
                .data()
                .iter()
                .map(|&v| v + normal.sample(&mut rng) as f32)
                .collect();
            Projection::new(clean.view().clone(), data)
        })
        .collect()
}

/// Input sets whose back projections the bp codec must encode for `arms`.
fn bp_view_sets(arms: &[Arm]) -> Vec<(Encoding, Vec<f64>)> {
    let mut sets: Vec<(Encoding, Vec<f64>)> = Vec::new();
    let mut push = |e: Encoding, s: Vec<f64>| {
        if !sets.iter().any(|(e2, s2)| *e2 == e && s2 == &s) {
            sets.push((e, s));
        }
    };
    push(Encoding::ViewGuided, vec![0.0]);
    for arm in arms {
        let enc = arm.variant.encoding();
        push(enc, arm.inputs.clone());
        push(Encoding::ViewGuided, arm.inputs.clone());
        if !arm.new_views.is_empty() {
            push(enc, arm.new_views.clone());
        }
    }
    sets
}

fn lift_sample(sample: &Sample, encoding: Encoding, angles: &[f64]) -> Result<Volume> {
    let imgs = views_for(sample, angles)?;
    match encoding {
        Encoding::ViewGuided => bp_volume(&imgs),
        Encoding::Direct => direct_volume(&imgs),
    }
}

/// Trains the ct codec on the sample volumes.
pub fn train_ct_codec(
    ae: VqAutoencoder,
    samples: &[Sample],
    config: &CodecTrainConfig,
) -> Result<(VqAutoencoder, LossCurve)> {
    train_codec_with(ae, samples.len(), 1, |i, _| Ok(Cow::Borrowed(&samples[i].volume)), config)
}

/// Trains the bp codec; every epoch lifts each sample through one randomly
/// drawn input set among those used by `arms`.
pub fn train_bp_codec(
    ae: VqAutoencoder,
    samples: &[Sample],
    arms: &[Arm],
    config: &CodecTrainConfig,
) -> Result<(VqAutoencoder, LossCurve)> {
    let sets = bp_view_sets(arms);
    train_codec_with(
        ae,
        samples.len(),
        sets.len(),
        |i, j| lift_sample(&samples[i], sets[j].0, &sets[j].1).map(Cow::Owned),
        config,
    )
}

/// Distinct view-guided input sets feeding new-view synthesis.
fn mapper_input_sets(arms: &[Arm]) -> Vec<Vec<f64>> {
    let mut sets: Vec<Vec<f64>> = Vec::new();
    for arm in arms.iter().filter(|a| !a.new_views.is_empty()) {
        if !sets.contains(&arm.inputs) {
            sets.push(arm.inputs.clone());
        }
    }
    if sets.is_empty() {
        sets.push(vec![0.0]);
    }
    sets
}

/// `(z_in, z_ct)` pairs in scaled latent units.
pub fn mapper_pairs(
    samples: &[Sample],
    arms: &[Arm],
    bp: &VqAutoencoder,
    ct: &VqAutoencoder,
) -> Result<Vec<(LatentGrid, LatentGrid)>> {
    let sets = mapper_input_sets(arms);
    let mut out = Vec::new();
    for s in samples {
        let z_ct = ct.encode_scaled(&s.volume)?;
        let enc = VpgeEncoder::new(bp, s.volume.extent());
        for angles in &sets {
            out.push((vpge_encode_scaled(&views_for(s, angles)?, &enc)?, z_ct.clone()));
        }
    }
    Ok(out)
}

pub fn denoiser_examples(samples: &[Sample], arm: &Arm, models: SynthesisModels) -> Result<Vec<DiffusionExample>> {
    samples
        .iter()
        .map(|s| {
            let imgs = views_for(s, &arm.inputs)?;
            let cond = build_condition(&imgs, models, arm.variant.encoding(), &arm.new_views)?;
            Ok(DiffusionExample {
                z0: models.ct_codec.encode_scaled(&s.volume)?,
                cond,
            })
        })
        .collect()
}

/// Epoch counts, learning rates and widths for a full training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub ct_epochs: usize,
    pub bp_epochs: usize,
    pub mapper_epochs: usize,
    pub denoiser_epochs: usize,
    pub codec_lr: f64,
    pub mapper_lr: f64,
    pub denoiser_lr: f64,
    pub batch_size: usize,
    pub timesteps: usize,
    pub codec: CodecConfig,
    pub mapper_channels: usize,
    pub denoiser_channels: usize,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            ct_epochs: 100,
            bp_epochs: 50,
            mapper_epochs: 50,
            denoiser_epochs: 100,
            codec_lr: 3e-4,
            mapper_lr: 3e-4,
            denoiser_lr: 2e-4,
            batch_size: 2,
            timesteps: 100,
            codec: CodecConfig::default(),
            mapper_channels: 32,
            denoiser_channels: 32,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn codec_train(&self, epochs: usize, stage: &str) -> CodecTrainConfig {
        CodecTrainConfig {
            epochs,
            lr: self.codec_lr,
            batch_size: self.batch_size,
            seed: stage_seed(self.seed, stage),
        }
    }

    pub fn mapper_train(&self) -> MapperTrainConfig {
        MapperTrainConfig {
            epochs: self.mapper_epochs,
            lr: self.mapper_lr,
            batch_size: self.batch_size,
            seed: stage_seed(self.seed, "mapper.train"),
        }
    }

    pub fn denoiser_train(&self) -> DenoiserTrainConfig {
        DenoiserTrainConfig {
            epochs: self.denoiser_epochs,
            lr: self.denoiser_lr,
            batch_size: self.batch_size,
            seed: stage_seed(self.seed, "denoiser.train"),
        }
    }

    pub fn new_ct_codec(&self) -> Result<VqAutoencoder> {
        VqAutoencoder::new(self.codec, stage_seed(self.seed, "ct.init"))
    }

    pub fn new_bp_codec(&self) -> Result<VqAutoencoder> {
        VqAutoencoder::new(self.codec, stage_seed(self.seed, "bp.init"))
    }

    pub fn new_mapper(&self) -> Result<LatentMapper> {
        LatentMapper::new(self.codec.code_dim, self.mapper_channels, stage_seed(self.seed, "mapper.init"))
    }

    pub fn new_denoiser(&self) -> Result<Denoiser> {
        Denoiser::new(
            DenoiserConfig {
                latent_dim: self.codec.code_dim,
                base_channels: self.denoiser_channels,
            },
            stage_seed(self.seed, "denoiser.init"),
        )
    }
}

/// Shared codecs and mapper plus one denoiser per arm.
#[derive(Clone, Debug)]
pub struct ModelSet {
    pub ct_codec: VqAutoencoder,
    pub bp_codec: VqAutoencoder,
    pub mapper: LatentMapper,
    pub schedule: NoiseSchedule,
    pub denoisers: BTreeMap<String, Denoiser>,
}

pub const CT_CODEC_FILE: &str = "ct_codec.xctw";
pub const BP_CODEC_FILE: &str = "bp_codec.xctw";
pub const MAPPER_FILE: &str = "mapper.xctw";

impl ModelSet {
    pub fn synthesis(&self) -> SynthesisModels<'_> {
        SynthesisModels {
            ct_codec: &self.ct_codec,
            bp_codec: &self.bp_codec,
            mapper: Some(&self.mapper),
        }
    }

    pub fn models_for(&self, arm: &Arm) -> Result<Models<'_>> {
        let Some(denoiser) = self.denoisers.get(&arm.name()) else {
            return Err(XctError::Model(format!("no denoiser trained for config `{}`", arm.name())));
        };
        Ok(Models {
            ct_codec: &self.ct_codec,
            bp_codec: &self.bp_codec,
            mapper: Some(&self.mapper),
            denoiser,
            schedule: &self.schedule,
        })
    }

    /// Arms among `arms` without a trained denoiser.
    pub fn missing(&self, arms: &[Arm]) -> Vec<String> {
        let mut out: Vec<String> = arms
            .iter()
            .map(Arm::name)
            .filter(|n| !self.denoisers.contains_key(n))
            .collect();
        out.dedup();
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.ct_codec.save(&dir.join(CT_CODEC_FILE))?;
        self.bp_codec.save(&dir.join(BP_CODEC_FILE))?;
        self.mapper.save(&dir.join(MAPPER_FILE))?;
        for (name, d) in &self.denoisers {
            d.save(&dir.join(format!("denoiser_{name}.xctw")))?;
        }
        Ok(())
    }

    /// Loads the shared models and whichever of `arms` have a denoiser on disk.
    pub fn load(dir: &Path, arms: &[Arm], timesteps: usize) -> Result<Self> {
        let mut denoisers = BTreeMap::new();
        for arm in arms {
            let path = dir.join(arm.denoiser_file());
            if path.exists() {
                denoisers.insert(arm.name(), Denoiser::load(&path)?);
            }
        }
        Ok(Self {
            ct_codec: VqAutoencoder::load(&dir.join(CT_CODEC_FILE))?,
            bp_codec: VqAutoencoder::load(&dir.join(BP_CODEC_FILE))?,
            mapper: LatentMapper::load(&dir.join(MAPPER_FILE))?,
            schedule: cosine_schedule(timesteps)?,
            denoisers,
        })
    }
}

/// Loss curves of a training run, keyed by stage.
pub type Curves = BTreeMap<String, LossCurve>;

/// Trains every stage for `arms` on `train`.
pub fn train_model_set(
    train: &[Sample],
    arms: &[Arm],
    plan: &TrainPlan,
    mut log: impl FnMut(&str),
) -> Result<(ModelSet, Curves)> {
    if train.is_empty() {
        return invalid("training split is empty");
    }
    let mut curves = Curves::new();
    let (ct_codec, c) = train_ct_codec(plan.new_ct_codec()?, train, &plan.codec_train(plan.ct_epochs, "ct.train"))?;
    log(&format!("ct codec: {} steps, final epoch loss {:?}", c.steps.len(), c.epochs.last()));
    curves.insert("codec-ct".into(), c);

    let (bp_codec, c) = train_bp_codec(plan.new_bp_codec()?, train, arms, &plan.codec_train(plan.bp_epochs, "bp.train"))?;
    log(&format!("bp codec: {} steps, final epoch loss {:?}", c.steps.len(), c.epochs.last()));
    curves.insert("codec-bp".into(), c);

    let pairs = mapper_pairs(train, arms, &bp_codec, &ct_codec)?;
    let (mapper, c) = train_latent_mapper(plan.new_mapper()?, &pairs, &plan.mapper_train())?;
    log(&format!("mapper: {} steps, final epoch loss {:?}", c.steps.len(), c.epochs.last()));
    curves.insert("mapper".into(), c);

    let mut set = ModelSet {
        ct_codec,
        bp_codec,
        mapper,
        schedule: cosine_schedule(plan.timesteps)?,
        denoisers: BTreeMap::new(),
    };
    for arm in arms {
        let name = arm.name();
        if set.denoisers.contains_key(&name) {
            continue;
        }
        let data = denoiser_examples(train, arm, set.synthesis())?;
        let (d, c) = train_denoiser(plan.new_denoiser()?, &data, &set.schedule, &plan.denoiser_train())?;
        log(&format!("denoiser {name}: {} steps, final epoch loss {:?}", c.steps.len(), c.epochs.last()));
        curves.insert(format!("denoiser_{name}"), c);
        set.denoisers.insert(name, d);
    }
    Ok((set, curves))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconRow {
    pub config: String,
    pub sample_id: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub runtime_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config: String,
    pub samples: usize,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
}

/// Per-sample metrics of one or more configurations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub rows: Vec<ReconRow>,
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

impl ReconReport {
    pub fn extend(&mut self, other: ReconReport) {
        self.rows.extend(other.rows);
    }

    /// Means per configuration, in first-appearance order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut order: Vec<String> = Vec::new();
        let mut acc: BTreeMap<String, (usize, f64, f64)> = BTreeMap::new();
        for r in &self.rows {
            if !acc.contains_key(&r.config) {
                order.push(r.config.clone());
            }
            let e = acc.entry(r.config.clone()).or_default();
            e.0 += 1;
            e.1 += r.psnr_db;
            e.2 += r.ssim;
        }
        order
            .into_iter()
            .map(|c| {
                let (n, p, s) = acc[&c];
                SummaryRow {
                    config: c,
                    samples: n,
                    mean_psnr_db: p / n as f64,
                    mean_ssim: s / n as f64,
                }
            })
            .collect()
    }

    pub fn mean_psnr(&self, config: &str) -> Option<f64> {
        self.summary().into_iter().find(|r| r.config == config).map(|r| r.mean_psnr_db)
    }

    /// `config,sample_id,psnr_db,ssim,runtime_ms`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("config,sample_id,psnr_db,ssim,runtime_ms\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:.6},{}", r.config, r.sample_id, fmt_db(r.psnr_db), r.ssim, r.runtime_ms);
        }
        out
    }

    /// `config,samples,mean_psnr_db,mean_ssim`.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("config,samples,mean_psnr_db,mean_ssim\n");
        for r in self.summary() {
            let _ = writeln!(out, "{},{},{},{:.6}", r.config, r.samples, fmt_db(r.mean_psnr_db), r.mean_ssim);
        }
        out
    }
}

/// Evaluation options shared by the harnesses.
#[derive(Clone, Copy, Debug, Default)]
pub struct EvalOptions {
    /// Record wall-clock runtime; otherwise `runtime_ms` is 0 so reports
    /// are byte-reproducible.
    pub timing: bool,
}

/// Reconstructs every test sample under `arm` and scores it.
pub fn evaluate_arm(
    label: &str,
    arm: &Arm,
    models: &ModelSet,
    test: &[Sample],
    seed: u64,
    opts: EvalOptions,
    mut on_volume: impl FnMut(&Sample, &Volume) -> Result<()>,
) -> Result<ReconReport> {
    let m = models.models_for(arm)?;
    let mut report = ReconReport::default();
    for s in test {
        let start = Instant::now();
        let imgs = views_for(s, &arm.inputs)?;
        let v = reconstruct_with(&imgs, m, arm.variant.encoding(), &arm.new_views, seed ^ s.index as u64)?;
        let runtime_ms = if opts.timing { start.elapsed().as_millis() as u64 } else { 0 };
        report.rows.push(ReconRow {
            config: label.to_string(),
            sample_id: s.index,
            psnr_db: psnr(&v, &s.volume)?,
            ssim: ssim(&v, &s.volume)?,
            runtime_ms,
        });
        on_volume(s, &v)?;
    }
    Ok(report)
}

fn ensure_trained(models: &ModelSet, arms: &[(String, Arm)]) -> Result<()> {
    let arms: Vec<Arm> = arms.iter().map(|(_, a)| a.clone()).collect();
    let missing = models.missing(&arms);
    if !missing.is_empty() {
        return Err(XctError::Model(format!("missing trained configs: {}", missing.join(", "))));
    }
    Ok(())
}

/// PSNR/SSIM versus input-view count for each angular range (no new views).
pub fn view_sweep(
    counts: &[usize],
    ranges: &[ViewRange],
    models: &ModelSet,
    test: &[Sample],
    seed: u64,
    opts: EvalOptions,
) -> Result<ReconReport> {
    let arms = sweep_arms(counts, ranges)?;
    ensure_trained(models, &arms)?;
    let mut report = ReconReport::default();
    for (label, arm) in &arms {
        report.extend(evaluate_arm(label, arm, models, test, seed, opts, |_, _| Ok(()))?);
    }
    Ok(report)
}

/// Every [`angle_arms`] row.
pub fn angle_suite(models: &ModelSet, test: &[Sample], seed: u64, opts: EvalOptions) -> Result<ReconReport> {
    let arms = angle_arms();
    ensure_trained(models, &arms)?;
    let mut report = ReconReport::default();
    for (label, arm) in &arms {
        report.extend(evaluate_arm(label, arm, models, test, seed, opts, |_, _| Ok(()))?);
    }
    Ok(report)
}

/// Every [`ablation_arms`] row.
pub fn ablation_suite(models: &ModelSet, test: &[Sample], seed: u64, opts: EvalOptions) -> Result<ReconReport> {
    let arms = ablation_arms();
    ensure_trained(models, &arms)?;
    let mut report = ReconReport::default();
    for (label, arm) in &arms {
        report.extend(evaluate_arm(label, arm, models, test, seed, opts, |_, _| Ok(()))?);
    }
    Ok(report)
}
