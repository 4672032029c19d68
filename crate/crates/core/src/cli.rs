//! `xct` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::codec::VqAutoencoder;
use crate::diffusion::{cosine_schedule, train_denoiser, Denoiser};
use crate::error::{Result, XctError};
use crate::geometry::{Extent3, Projection, ViewParams, ViewRange};
use crate::io::{read_projection, read_volume, write_atomic, write_projection, write_slices, write_volume};
use crate::phantom::{Dataset, Manifest, PhantomSpec, Sample};
use crate::pipeline::{
    ablation_arms, angle_arms, default_new_views, denoiser_examples, evaluate_arm, mapper_pairs, psnr, reconstruct_with, ssim,
    sweep_arms, synthesize_new_view, train_bp_codec, train_ct_codec, train_latent_mapper, Arm, EvalOptions,
    LatentMapper, ModelSet, ReconReport, ReconRow, SynthesisModels, TrainPlan, Variant, BP_CODEC_FILE, CT_CODEC_FILE,
    MAPPER_FILE,
};
use crate::train::LossCurve;

#[derive(Parser, Debug, Serialize)]
#[command(name = "xct", version, about = "Few-view X-ray to CT reconstruction with dual-view guided latent diffusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
pub enum Command {
    /// Generate a phantom dataset with forward-projected views.
    GenData(GenDataArgs),
    /// Train one model stage into a model directory.
    Train(TrainArgs),
    /// Reconstruct a volume from projection files.
    Reconstruct(ReconstructArgs),
    /// Run a view-count sweep, ablation grid or new-view angle grid over several training seeds.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct GenDataArgs {
    /// Total number of samples (train + test).
    #[arg(long, default_value_t = 220)]
    pub count: usize,
    /// Test samples taken from the end of the stream [default: count / 11].
    #[arg(long)]
    pub test_count: Option<usize>,
    /// Voxels per axis.
    #[arg(long, default_value_t = 32)]
    pub extent: usize,
    /// Stored view angles in degrees.
    #[arg(long, value_delimiter = ',', default_value = "0,90")]
    pub views: Vec<f64>,
    /// Gaussian pixel noise added after normalization.
    #[arg(long, default_value_t = 0.0)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Add one bright spherical lesion per phantom.
    #[arg(long)]
    pub pathology: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Stage {
    CodecCt,
    CodecBp,
    Mapper,
    Denoiser,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::CodecCt => "codec-ct",
            Stage::CodecBp => "codec-bp",
            Stage::Mapper => "mapper",
            Stage::Denoiser => "denoiser",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Scope {
    /// Sweep configurations only.
    Sweep,
    /// Ablation configurations only.
    Ablation,
    /// New-view angle configurations only.
    Angles,
    /// All of the above.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum VariantArg {
    Base,
    Newview,
    Vpge,
    Dvg,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Base => Variant::Base,
            VariantArg::Newview => Variant::NewView,
            VariantArg::Vpge => Variant::Vpge,
            VariantArg::Dvg => Variant::Dvg,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SweepGrid {
    /// Input view counts of the sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,8")]
    pub counts: Vec<usize>,
    /// Angular ranges of the sweep in degrees (90 or 360).
    #[arg(long, value_delimiter = ',', default_value = "90,360")]
    pub ranges: Vec<u32>,
}

impl SweepGrid {
    fn ranges(&self) -> Result<Vec<ViewRange>> {
        self.ranges.iter().map(|&r| ViewRange::from_degrees(r)).collect()
    }

    fn arms(&self) -> Result<Vec<(String, Arm)>> {
        sweep_arms(&self.counts, &self.ranges()?)
    }
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: Stage,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Model directory (checkpoints, loss curves and config echoes).
    #[arg(long)]
    pub models: PathBuf,
    /// Epochs [default: 100 codec-ct, 50 codec-bp, 50 mapper, 100 denoiser].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate [default: 3e-4 codecs and mapper, 2e-4 denoiser].
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub batch_size: usize,
    /// Diffusion steps T.
    #[arg(long, default_value_t = 100)]
    pub timesteps: usize,
    /// Denoiser input view angles.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub inputs: Vec<f64>,
    /// Denoiser new-view angles: `none`, `default`, or a list.
    #[arg(long, default_value = "default")]
    pub new_views: String,
    /// Denoiser variant [default: dvg with new views, vpge without].
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Configurations whose inputs the bp codec and mapper are trained on.
    #[arg(long, value_enum, default_value = "all")]
    pub scope: Scope,
    #[command(flatten)]
    pub grid: SweepGrid,
}

#[derive(Args, Debug, Serialize)]
pub struct ReconstructArgs {
    /// Model directory.
    #[arg(long)]
    pub models: PathBuf,
    /// Input projection files (`.xctp`).
    #[arg(long, value_delimiter = ',', required = true)]
    pub inputs: Vec<PathBuf>,
    /// New-view angles: `none`, `default`, or a list.
    #[arg(long, default_value = "default")]
    pub new_views: String,
    /// Variant [default: dvg with new views, vpge without].
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub timesteps: usize,
    /// Ground-truth volume (`.xctv`) for a metrics row.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum ExperimentKind {
    /// PSNR/SSIM versus input-view count per angular range.
    Sweep,
    /// Variant × input set × new-view count grid.
    Ablation,
    /// Single AP input with one new view at 10, 30, 45, 60, 90 or 120 degrees.
    Angles,
}

#[derive(Args, Debug, Serialize)]
pub struct ExperimentArgs {
    #[arg(value_enum)]
    pub kind: ExperimentKind,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Model root; training seed `s` lives in `seed_<s>/`.
    #[arg(long)]
    pub models: PathBuf,
    /// Number of training seeds (0..seeds).
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[command(flatten)]
    pub grid: SweepGrid,
    /// Train missing models instead of failing.
    #[arg(long)]
    pub train: bool,
    #[arg(long, default_value_t = 100)]
    pub ct_epochs: usize,
    #[arg(long, default_value_t = 50)]
    pub bp_epochs: usize,
    #[arg(long, default_value_t = 50)]
    pub mapper_epochs: usize,
    #[arg(long, default_value_t = 100)]
    pub denoiser_epochs: usize,
    #[arg(long, default_value_t = 100)]
    pub timesteps: usize,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    pub sample_seed: u64,
    /// Record wall-clock runtime (makes reports non-reproducible).
    #[arg(long)]
    pub timing: bool,
    /// Write middle-slice PGMs of every reconstruction.
    #[arg(long)]
    pub slices: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            let line = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("{}", line.trim());
            return 1;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("XCT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| XctError::Usage(format!("XCT_THREADS must be a positive integer, got `{v}`")))?;
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a, cli),
        Command::Train(a) => train(a, cli),
        Command::Reconstruct(a) => reconstruct_cmd(a, cli),
        Command::Experiment(a) => experiment(a, cli),
    }
}

fn config_json(cli: &Cli) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(cli)?;
    s.push('\n');
    Ok(s.into_bytes())
}

/// Output directory built under `<out>.partial` and renamed on success.
struct Staged {
    tmp: PathBuf,
    out: PathBuf,
}

impl Staged {
    fn new(out: &Path, force: bool) -> Result<Self> {
        if out.exists() {
            let non_empty = fs::read_dir(out)?.next().is_some();
            if non_empty && !force {
                return Err(XctError::Usage(format!(
                    "output directory {} is not empty (pass --force to replace it)",
                    out.display()
                )));
            }
        }
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".partial");
        let tmp = out.with_file_name(name);
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        Ok(Self {
            tmp,
            out: out.to_path_buf(),
        })
    }

    fn path(&self) -> &Path {
        &self.tmp
    }

    fn commit(self) -> Result<()> {
        if self.out.exists() {
            fs::remove_dir_all(&self.out)?;
        }
        fs::rename(&self.tmp, &self.out)?;
        Ok(())
    }
}

fn gen_data(a: &GenDataArgs, cli: &Cli) -> Result<()> {
    if a.count == 0 {
        return Err(XctError::Usage("--count must be ≥ 1".into()));
    }
    let test_count = a.test_count.unwrap_or(a.count / 11);
    if test_count >= a.count {
        return Err(XctError::Usage(format!(
            "--test-count {test_count} leaves no training samples out of {}",
            a.count
        )));
    }
    if a.views.is_empty() {
        return Err(XctError::Usage("--views needs at least one angle".into()));
    }
    let spec = PhantomSpec {
        extent: a.extent,
        pathology: a.pathology,
        ..PhantomSpec::default()
    };
    spec.validate()?;
    let grid = Extent3::cube(a.extent);
    let views: Vec<ViewParams> = a.views.iter().map(|&v| ViewParams::new(v, grid)).collect::<Result<_>>()?;
    let staged = Staged::new(&a.out, a.force)?;
    let manifest = Manifest {
        count: a.count,
        test_count,
        extent: a.extent,
        seed: a.seed,
        views: a.views.clone(),
        noise_sigma: a.noise_sigma,
        phantom: spec.clone(),
    };
    const CHUNK: usize = 32;
    let mut first = 0;
    while first < a.count {
        let n = CHUNK.min(a.count - first);
        let samples = crate::phantom::make_dataset_range(&spec, &views, a.noise_sigma, a.seed, first, n)?;
        crate::phantom::write_dataset(staged.path(), &manifest, &samples)?;
        first += n;
    }
    write_atomic(&staged.path().join("config.json"), &config_json(cli)?)?;
    staged.commit()?;
    eprintln!("wrote {} samples ({} test) to {}", a.count, test_count, a.out.display());
    Ok(())
}

fn parse_new_views(spec: &str, inputs: &[f64]) -> Result<Vec<f64>> {
    match spec.trim() {
        "none" => Ok(Vec::new()),
        "default" => Ok(default_new_views(inputs)),
        list => list
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| XctError::Usage(format!("--new-views: `{t}` is not an angle, `none` or `default`")))
            })
            .collect(),
    }
}

fn arm_for(variant: Option<VariantArg>, inputs: Vec<f64>, new_views: Vec<f64>) -> Result<Arm> {
    let variant = variant
        .map(Variant::from)
        .unwrap_or(if new_views.is_empty() { Variant::Vpge } else { Variant::Dvg });
    Arm::new(variant, inputs, new_views).map_err(|e| XctError::Usage(e.to_string()))
}

fn scope_arms(scope: Scope, grid: &SweepGrid) -> Result<Vec<Arm>> {
    let mut arms = Vec::new();
    if matches!(scope, Scope::Sweep | Scope::All) {
        arms.extend(grid.arms()?.into_iter().map(|(_, a)| a));
    }
    if matches!(scope, Scope::Ablation | Scope::All) {
        arms.extend(ablation_arms().into_iter().map(|(_, a)| a));
    }
    if matches!(scope, Scope::Angles | Scope::All) {
        arms.extend(angle_arms().into_iter().map(|(_, a)| a));
    }
    Ok(arms)
}

fn require(models: &Path, file: &str, stage: &str) -> Result<PathBuf> {
    let p = models.join(file);
    if !p.exists() {
        return Err(XctError::Model(format!(
            "missing {} (run `xct train --stage {stage}` first)",
            p.display()
        )));
    }
    Ok(p)
}

fn write_stage_outputs(models: &Path, tag: &str, curve: &LossCurve, cli: &Cli) -> Result<()> {
    write_atomic(&models.join(format!("loss_{tag}.csv")), curve.to_csv().as_bytes())?;
    write_atomic(&models.join(format!("config_{tag}.json")), &config_json(cli)?)
}

fn load_train(data: &Path) -> Result<Vec<Sample>> {
    let ds = Dataset::open(data)?;
    ds.load_range(ds.train_indices())
}

fn train(a: &TrainArgs, cli: &Cli) -> Result<()> {
    let mut plan = TrainPlan {
        seed: a.seed,
        batch_size: a.batch_size,
        timesteps: a.timesteps,
        ..TrainPlan::default()
    };
    if let Some(e) = a.epochs {
        plan.ct_epochs = e;
        plan.bp_epochs = e;
        plan.mapper_epochs = e;
        plan.denoiser_epochs = e;
    }
    if let Some(lr) = a.lr {
        plan.codec_lr = lr;
        plan.mapper_lr = lr;
        plan.denoiser_lr = lr;
    }
    let m = &a.models;
    match a.stage {
        Stage::CodecCt | Stage::CodecBp => {}
        Stage::Mapper => {
            require(m, CT_CODEC_FILE, "codec-ct")?;
            require(m, BP_CODEC_FILE, "codec-bp")?;
        }
        Stage::Denoiser => {
            require(m, CT_CODEC_FILE, "codec-ct")?;
            require(m, BP_CODEC_FILE, "codec-bp")?;
        }
    }
    let arm = if a.stage == Stage::Denoiser {
        let nv = parse_new_views(&a.new_views, &a.inputs)?;
        let arm = arm_for(a.variant, a.inputs.clone(), nv)?;
        if !arm.new_views.is_empty() {
            require(m, MAPPER_FILE, "mapper")?;
        }
        Some(arm)
    } else {
        None
    };
    let samples = load_train(&a.data)?;
    fs::create_dir_all(m)?;
    match a.stage {
        Stage::CodecCt => {
            let (ae, curve) = train_ct_codec(plan.new_ct_codec()?, &samples, &plan.codec_train(plan.ct_epochs, "ct.train"))?;
            ae.save(&m.join(CT_CODEC_FILE))?;
            write_stage_outputs(m, a.stage.name(), &curve, cli)?;
        }
        Stage::CodecBp => {
            let arms = scope_arms(a.scope, &a.grid)?;
            let (ae, curve) = train_bp_codec(
                plan.new_bp_codec()?,
                &samples,
                &arms,
                &plan.codec_train(plan.bp_epochs, "bp.train"),
            )?;
            ae.save(&m.join(BP_CODEC_FILE))?;
            write_stage_outputs(m, a.stage.name(), &curve, cli)?;
        }
        Stage::Mapper => {
            let ct = VqAutoencoder::load(&m.join(CT_CODEC_FILE))?;
            let bp = VqAutoencoder::load(&m.join(BP_CODEC_FILE))?;
            let arms = scope_arms(a.scope, &a.grid)?;
            let pairs = mapper_pairs(&samples, &arms, &bp, &ct)?;
            let (mapper, curve) = train_latent_mapper(plan.new_mapper()?, &pairs, &plan.mapper_train())?;
            mapper.save(&m.join(MAPPER_FILE))?;
            write_stage_outputs(m, a.stage.name(), &curve, cli)?;
        }
        Stage::Denoiser => {
            let arm = arm.expect("denoiser arm");
            let ct = VqAutoencoder::load(&m.join(CT_CODEC_FILE))?;
            let bp = VqAutoencoder::load(&m.join(BP_CODEC_FILE))?;
            let mapper = if arm.new_views.is_empty() {
                None
            } else {
                Some(LatentMapper::load(&m.join(MAPPER_FILE))?)
            };
            let synth = SynthesisModels {
                ct_codec: &ct,
                bp_codec: &bp,
                mapper: mapper.as_ref(),
            };
            let schedule = cosine_schedule(plan.timesteps)?;
            let data = denoiser_examples(&samples, &arm, synth)?;
            let (den, curve) = train_denoiser(plan.new_denoiser()?, &data, &schedule, &plan.denoiser_train())?;
            den.save(&m.join(arm.denoiser_file()))?;
            write_stage_outputs(m, &format!("denoiser_{}", arm.name()), &curve, cli)?;
        }
    }
    eprintln!("trained {} into {}", a.stage.name(), m.display());
    Ok(())
}

fn reconstruct_cmd(a: &ReconstructArgs, cli: &Cli) -> Result<()> {
    let images: Vec<Projection> = a.inputs.iter().map(|p| read_projection(p)).collect::<Result<_>>()?;
    let inputs: Vec<f64> = images.iter().map(|p| p.view().angle_deg()).collect();
    let new_views = parse_new_views(&a.new_views, &inputs)?;
    let arm = arm_for(a.variant, inputs, new_views)?;
    let m = &a.models;
    require(m, CT_CODEC_FILE, "codec-ct")?;
    require(m, BP_CODEC_FILE, "codec-bp")?;
    if !arm.new_views.is_empty() {
        require(m, MAPPER_FILE, "mapper")?;
    }
    let den_path = m.join(arm.denoiser_file());
    if !den_path.exists() {
        return Err(XctError::Model(format!(
            "no denoiser for config `{}` in {} (run `xct train --stage denoiser` with matching --inputs/--new-views)",
            arm.name(),
            m.display()
        )));
    }
    let truth = a.truth.as_deref().map(read_volume).transpose()?;
    let ct = VqAutoencoder::load(&m.join(CT_CODEC_FILE))?;
    let bp = VqAutoencoder::load(&m.join(BP_CODEC_FILE))?;
    let mapper = if arm.new_views.is_empty() {
        None
    } else {
        Some(LatentMapper::load(&m.join(MAPPER_FILE))?)
    };
    let denoiser = Denoiser::load(&den_path)?;
    let schedule = cosine_schedule(a.timesteps)?;
    let models = crate::pipeline::Models {
        ct_codec: &ct,
        bp_codec: &bp,
        mapper: mapper.as_ref(),
        denoiser: &denoiser,
        schedule: &schedule,
    };
    let staged = Staged::new(&a.out, a.force)?;
    let volume = reconstruct_with(&images, models, arm.variant.encoding(), &arm.new_views, a.seed)?;
    write_volume(&staged.path().join("volume.xctv"), &volume)?;
    write_slices(staged.path(), "recon", &volume)?;
    if arm.variant == Variant::Dvg {
        for &angle in &arm.new_views {
            let (img, _) = synthesize_new_view(&images, angle, models.into())?;
            write_projection(
                &staged.path().join(crate::phantom::view_file_name(angle).replace("view_", "new_view_")),
                &img,
            )?;
        }
    }
    if let Some(t) = truth {
        let report = ReconReport {
            rows: vec![ReconRow {
                config: arm.name(),
                sample_id: 0,
                psnr_db: psnr(&volume, &t)?,
                ssim: ssim(&volume, &t)?,
                runtime_ms: 0,
            }],
        };
        write_atomic(&staged.path().join("metrics.csv"), report.to_csv().as_bytes())?;
        write_slices(staged.path(), "truth", &t)?;
    }
    write_atomic(&staged.path().join("config.json"), &config_json(cli)?)?;
    staged.commit()?;
    eprintln!("wrote reconstruction `{}` to {}", arm.name(), a.out.display());
    Ok(())
}

fn experiment_arms(a: &ExperimentArgs) -> Result<Vec<(String, Arm)>> {
    match a.kind {
        ExperimentKind::Sweep => a.grid.arms(),
        ExperimentKind::Ablation => Ok(ablation_arms()),
        ExperimentKind::Angles => Ok(angle_arms()),
    }
}

fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

/// Trains whichever shared models and denoisers are missing in `dir`.
fn train_missing(dir: &Path, train: &[Sample], arms: &[Arm], plan: &TrainPlan) -> Result<()> {
    fs::create_dir_all(dir)?;
    let log = |m: &str| eprintln!("[{}] {m}", dir.display());
    let ct = match VqAutoencoder::load(&dir.join(CT_CODEC_FILE)) {
        Ok(ae) => ae,
        Err(_) => {
            let (ae, c) = train_ct_codec(plan.new_ct_codec()?, train, &plan.codec_train(plan.ct_epochs, "ct.train"))?;
            ae.save(&dir.join(CT_CODEC_FILE))?;
            write_atomic(&dir.join("loss_codec-ct.csv"), c.to_csv().as_bytes())?;
            log("trained codec-ct");
            ae
        }
    };
    let bp = match VqAutoencoder::load(&dir.join(BP_CODEC_FILE)) {
        Ok(ae) => ae,
        Err(_) => {
            let (ae, c) = train_bp_codec(plan.new_bp_codec()?, train, arms, &plan.codec_train(plan.bp_epochs, "bp.train"))?;
            ae.save(&dir.join(BP_CODEC_FILE))?;
            write_atomic(&dir.join("loss_codec-bp.csv"), c.to_csv().as_bytes())?;
            log("trained codec-bp");
            ae
        }
    };
    let mapper = match LatentMapper::load(&dir.join(MAPPER_FILE)) {
        Ok(m) => m,
        Err(_) => {
            let pairs = mapper_pairs(train, arms, &bp, &ct)?;
            let (m, c) = train_latent_mapper(plan.new_mapper()?, &pairs, &plan.mapper_train())?;
            m.save(&dir.join(MAPPER_FILE))?;
            write_atomic(&dir.join("loss_mapper.csv"), c.to_csv().as_bytes())?;
            log("trained mapper");
            m
        }
    };
    let synth = SynthesisModels {
        ct_codec: &ct,
        bp_codec: &bp,
        mapper: Some(&mapper),
    };
    let schedule = cosine_schedule(plan.timesteps)?;
    for arm in arms {
        let path = dir.join(arm.denoiser_file());
        if path.exists() {
            continue;
        }
        let data = denoiser_examples(train, arm, synth)?;
        let (d, c) = train_denoiser(plan.new_denoiser()?, &data, &schedule, &plan.denoiser_train())?;
        d.save(&path)?;
        write_atomic(&dir.join(format!("loss_denoiser_{}.csv", arm.name())), c.to_csv().as_bytes())?;
        log(&format!("trained denoiser {}", arm.name()));
    }
    Ok(())
}

fn experiment(a: &ExperimentArgs, cli: &Cli) -> Result<()> {
    if a.seeds == 0 {
        return Err(XctError::Usage("--seeds must be ≥ 1".into()));
    }
    let labelled = experiment_arms(a)?;
    let arms: Vec<Arm> = labelled.iter().map(|(_, a)| a.clone()).collect();
    let ds = Dataset::open(&a.data)?;
    let test = ds.load_range(ds.test_indices())?;
    if test.is_empty() {
        return Err(XctError::Invalid(format!("{} has no test split", a.data.display())));
    }
    let mut missing = Vec::new();
    for s in 0..a.seeds {
        let dir = seed_dir(&a.models, s);
        let shared = [CT_CODEC_FILE, BP_CODEC_FILE, MAPPER_FILE]
            .iter()
            .filter(|f| !dir.join(f).exists())
            .map(|f| format!("seed_{s}/{f}"));
        missing.extend(shared);
        missing.extend(
            arms.iter()
                .filter(|arm| !dir.join(arm.denoiser_file()).exists())
                .map(|arm| format!("seed_{s}/{}", arm.denoiser_file())),
        );
    }
    missing.dedup();
    if !missing.is_empty() {
        if !a.train {
            return Err(XctError::Model(format!(
                "missing trained configs (pass --train to build them): {}",
                missing.join(", ")
            )));
        }
        let train = ds.load_range(ds.train_indices())?;
        for s in 0..a.seeds {
            let plan = TrainPlan {
                ct_epochs: a.ct_epochs,
                bp_epochs: a.bp_epochs,
                mapper_epochs: a.mapper_epochs,
                denoiser_epochs: a.denoiser_epochs,
                timesteps: a.timesteps,
                seed: s,
                ..TrainPlan::default()
            };
            train_missing(&seed_dir(&a.models, s), &train, &arms, &plan)?;
        }
    }

    let staged = Staged::new(&a.out, a.force)?;
    let opts = EvalOptions { timing: a.timing };
    let mut all = ReconReport::default();
    let mut by_seed = ReconReport::default();
    for s in 0..a.seeds {
        let set = ModelSet::load(&seed_dir(&a.models, s), &arms, a.timesteps)?;
        for (label, arm) in &labelled {
            let slices_dir = staged.path().join("slices").join(format!("seed_{s}")).join(label);
            let r = evaluate_arm(label, arm, &set, &test, a.sample_seed, opts, |sample, v| {
                if a.slices {
                    fs::create_dir_all(&slices_dir)?;
                    write_slices(&slices_dir, &format!("sample_{:04}", sample.index), v)?;
                }
                Ok(())
            })?;
            for row in &r.rows {
                by_seed.rows.push(ReconRow {
                    config: format!("{label}@seed{s}"),
                    ..row.clone()
                });
            }
            all.extend(r);
        }
    }
    write_atomic(&staged.path().join("report.csv"), by_seed.to_csv().as_bytes())?;
    write_atomic(&staged.path().join("summary.csv"), all.summary_csv().as_bytes())?;
    write_atomic(&staged.path().join("summary_by_seed.csv"), by_seed.summary_csv().as_bytes())?;
    write_atomic(&staged.path().join("config.json"), &config_json(cli)?)?;
    staged.commit()?;
    eprintln!("wrote {} rows to {}", by_seed.rows.len(), a.out.display());
    Ok(())
}
