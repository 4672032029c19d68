//! Synthetic ellipsoid phantoms and paired (volume, X-ray views) datasets.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, XctError};
use crate::geometry::{forward_project, Extent3, Projection, ViewParams, Volume};
use crate::io;

const BODY_INTERIOR: f32 = 0.2;
const BODY_SKIN: f32 = 0.35;
const SKIN_THICKNESS: f64 = 0.08;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub extent: usize,
    /// Inclusive range of inner ellipsoid counts.
    pub ellipsoids: (usize, usize),
    /// Inner ellipsoid intensities are drawn from this range.
    pub intensity: (f32, f32),
    pub pathology: bool,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            extent: 32,
            ellipsoids: (3, 8),
            intensity: (0.3, 0.9),
            pathology: false,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.extent < 8 {
            return invalid(format!("phantom extent must be ≥ 8, got {}", self.extent));
        }
        if self.ellipsoids.0 > self.ellipsoids.1 {
            return invalid("ellipsoid count range is empty");
        }
        let (lo, hi) = self.intensity;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return invalid(format!("intensity range ({lo}, {hi}) must lie within [0, 1]"));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

struct Ellipsoid {
    center: [f64; 3],
    /// Rows are the body-frame axes.
    rotation: [[f64; 3]; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    /// Normalized radius²; ≤ 1 inside.
    fn level(&self, p: [f64; 3]) -> f64 {
        let q = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        (0..3)
            .map(|i| {
                let r = &self.rotation[i];
                let t = r[0] * q[0] + r[1] * q[1] + r[2] * q[2];
                (t / self.semi[i]).powi(2)
            })
            .sum()
    }
}

fn rotation(yaw: f64, pitch: f64, roll: f64) -> [[f64; 3]; 3] {
    let (cy, sy) = (yaw.cos(), yaw.sin());
    let (cp, sp) = (pitch.cos(), pitch.sin());
    let (cr, sr) = (roll.cos(), roll.sin());
    [
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ]
}

const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Body ellipsoid with a skin shell, inner rotated ellipsoids with nested
/// cores, and an optional bright lesion. Values are clamped to `[0, 1]`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.extent;
    let body = Ellipsoid {
        center: [0.0; 3],
        rotation: IDENTITY,
        semi: [
            rng.random_range(0.82..0.92),
            rng.random_range(0.62..0.74),
            rng.random_range(0.78..0.9),
        ],
    };
    let inner_body = Ellipsoid {
        semi: body.semi.map(|s| s - SKIN_THICKNESS),
        ..body
    };

    let count = rng.random_range(spec.ellipsoids.0..=spec.ellipsoids.1);
    let mut organs = Vec::with_capacity(count);
    for _ in 0..count {
        let center = [
            rng.random_range(-0.55..0.55) * body.semi[0],
            rng.random_range(-0.55..0.55) * body.semi[1],
            rng.random_range(-0.55..0.55) * body.semi[2],
        ];
        let shape = Ellipsoid {
            center,
            rotation: rotation(
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            ),
            semi: [
                rng.random_range(0.12..0.4),
                rng.random_range(0.12..0.4),
                rng.random_range(0.12..0.4),
            ],
        };
        let value = rng.random_range(spec.intensity.0..=spec.intensity.1);
        let core_value = (value + rng.random_range(-0.3f32..0.3)).clamp(0.0, 1.0);
        organs.push((shape, value, core_value));
    }
    let lesion = spec.pathology.then(|| {
        let r = rng.random_range(0.06..0.1);
        (
            Ellipsoid {
                center: [
                    rng.random_range(-0.4..0.4) * body.semi[0],
                    rng.random_range(-0.4..0.4) * body.semi[1],
                    rng.random_range(-0.4..0.4) * body.semi[2],
                ],
                rotation: IDENTITY,
                semi: [r; 3],
            },
            1.0f32,
        )
    });

    let coord = |i: usize| (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;
    let mut data = vec![0.0f32; n * n * n];
    for d in 0..n {
        for h in 0..n {
            for w in 0..n {
                let p = [coord(d), coord(h), coord(w)];
                if body.level(p) > 1.0 {
                    continue;
                }
                let mut v = if inner_body.level(p) <= 1.0 {
                    BODY_INTERIOR
                } else {
                    BODY_SKIN
                };
                for (shape, value, core) in &organs {
                    let l = shape.level(p);
                    if l <= 0.25 {
                        v = *core;
                    } else if l <= 1.0 {
                        v = *value;
                    }
                }
                if let Some((shape, value)) = &lesion {
                    if shape.level(p) <= 1.0 {
                        v = *value;
                    }
                }
                data[(d * n + h) * n + w] = v.clamp(0.0, 1.0);
            }
        }
    }
    Volume::new(Extent3::cube(n), data)
}

/// One phantom with its X-ray views.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub seed: u64,
    pub volume: Volume,
    pub projections: Vec<Projection>,
    pub noise_sigma: f64,
}

/// Per-sample seed from the dataset seed and sample index.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Min-max normalized forward projections of `volume` for each view.
pub fn clean_projections(volume: &Volume, views: &[ViewParams]) -> Result<Vec<Projection>> {
    views
        .iter()
        .map(|v| forward_project(volume, v).map(Projection::normalized))
        .collect()
}

pub fn make_sample(
    template: &PhantomSpec,
    views: &[ViewParams],
    noise_sigma: f64,
    seed: u64,
    index: usize,
) -> Result<Sample> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return invalid(format!("noise sigma must be ≥ 0, got {noise_sigma}"));
    }
    let s = sample_seed(seed, index);
    let volume = generate_phantom(&template.with_seed(s))?;
    let mut projections = clean_projections(&volume, views)?;
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        rng.set_stream(1);
        let normal = Normal::new(0.0, noise_sigma).expect("valid sigma");
        projections = projections
            .into_iter()
            .map(|p| p.map_pixels(|v| *v += normal.sample(&mut rng) as f32))
            .collect::<Result<_>>()?;
    }
    Ok(Sample {
        index,
        seed: s,
        volume,
        projections,
        noise_sigma,
    })
}

/// Samples `first..first + count` of the stream defined by `seed`.
pub fn make_dataset_range(
    template: &PhantomSpec,
    views: &[ViewParams],
    noise_sigma: f64,
    seed: u64,
    first: usize,
    count: usize,
) -> Result<Vec<Sample>> {
    if count == 0 {
        return invalid("dataset count must be ≥ 1");
    }
    if !(noise_sigma >= 0.0) {
        return invalid(format!("noise sigma must be ≥ 0, got {noise_sigma}"));
    }
    (first..first + count)
        .into_par_iter()
        .map(|i| make_sample(template, views, noise_sigma, seed, i))
        .collect()
}

pub fn make_dataset(
    count: usize,
    template: &PhantomSpec,
    views: &[ViewParams],
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<Sample>> {
    make_dataset_range(template, views, noise_sigma, seed, 0, count)
}

/// Disjoint train/test partition of one sample stream: train takes indices
/// `0..train`, test takes `train..train + test`.
pub fn make_split(
    train: usize,
    test: usize,
    template: &PhantomSpec,
    views: &[ViewParams],
    noise_sigma: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let tr = make_dataset_range(template, views, noise_sigma, seed, 0, train)?;
    let te = make_dataset_range(template, views, noise_sigma, seed, train, test)?;
    Ok((tr, te))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub test_count: usize,
    pub extent: usize,
    pub seed: u64,
    pub views: Vec<f64>,
    pub noise_sigma: f64,
    pub phantom: PhantomSpec,
}

pub fn sample_dir_name(index: usize) -> String {
    format!("sample_{index:04}")
}

pub fn view_file_name(angle_deg: f64) -> String {
    format!("view_{:03}deg.xctp", angle_deg.round() as i64)
}

/// Writes samples plus `manifest.json` into `dir` (which must exist).
pub fn write_dataset(dir: &Path, manifest: &Manifest, samples: &[Sample]) -> Result<()> {
    let mut names: Vec<String> = manifest.views.iter().map(|&a| view_file_name(a)).collect();
    names.sort();
    names.dedup();
    if names.len() != manifest.views.len() {
        return invalid("view angles collide after rounding to whole degrees");
    }
    for s in samples {
        let sd = dir.join(sample_dir_name(s.index));
        fs::create_dir_all(&sd)?;
        io::write_volume(&sd.join("volume.xctv"), &s.volume)?;
        for p in &s.projections {
            io::write_projection(&sd.join(view_file_name(p.view().angle_deg())), p)?;
        }
    }
    let json = serde_json::to_string_pretty(manifest)?;
    io::write_atomic(&dir.join("manifest.json"), json.as_bytes())?;
    Ok(())
}

/// On-disk dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| XctError::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let manifest = serde_json::from_str(&text).map_err(|e| XctError::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn train_indices(&self) -> std::ops::Range<usize> {
        0..self.manifest.count - self.manifest.test_count
    }

    pub fn test_indices(&self) -> std::ops::Range<usize> {
        self.manifest.count - self.manifest.test_count..self.manifest.count
    }

    pub fn load(&self, index: usize) -> Result<Sample> {
        let sd = self.root.join(sample_dir_name(index));
        let volume = io::read_volume(&sd.join("volume.xctv"))?;
        let projections = self
            .manifest
            .views
            .iter()
            .map(|&a| io::read_projection(&sd.join(view_file_name(a))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Sample {
            index,
            seed: sample_seed(self.manifest.seed, index),
            volume,
            projections,
            noise_sigma: self.manifest.noise_sigma,
        })
    }

    pub fn load_range(&self, range: std::ops::Range<usize>) -> Result<Vec<Sample>> {
        range.map(|i| self.load(i)).collect()
    }
}
