use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use xct_core::codec::LatentGrid;
use xct_core::diffusion::*;
use xct_core::geometry::Extent3;
use xct_core::Result;
use xct_tensor::{checkpoint, Tensor};

fn gaussian(e: Extent3, dim: usize, sd: f64, rng: &mut ChaCha8Rng) -> LatentGrid {
    let n = e.voxels() * dim;
    LatentGrid::new(e, dim, (0..n).map(|_| (sd * rng.sample::<f64, _>(StandardNormal)) as f32).collect()).unwrap()
}

fn small_denoiser(seed: u64) -> Denoiser {
    Denoiser::new(
        DenoiserConfig {
            latent_dim: 2,
            base_channels: 8,
        },
        seed,
    )
    .unwrap()
}

fn raw_cosine(t: f64, steps: f64) -> f64 {
    let s = 0.008;
    (((t / steps + s) / (1.0 + s)) * std::f64::consts::PI / 2.0).cos().powi(2)
}

#[test]
fn schedule_invariants() {
    for steps in [1, 10, 100, 1000] {
        let s = cosine_schedule(steps).unwrap();
        assert_eq!(s.steps(), steps);
        assert!(s.alphas().iter().all(|&a| a > 0.0 && a < 1.0));
        for t in 1..steps {
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
        }
        assert!(s.alpha_bar(steps) < 0.01);
        let mut prod = 1.0;
        for t in 1..=steps {
            prod *= s.alpha(t);
            assert!((s.alpha_bar(t) - prod).abs() <= 1e-6);
        }
    }
}

#[test]
fn cosine_schedule_matches_direct_evaluation() {
    let steps = 100;
    let s = cosine_schedule(steps).unwrap();
    let f0 = raw_cosine(0.0, steps as f64);
    let mut clipped = false;
    for t in 1..=steps {
        let a = raw_cosine(t as f64, steps as f64) / raw_cosine(t as f64 - 1.0, steps as f64);
        clipped |= !(0.001..=0.9999).contains(&a);
        assert!((s.alpha(t) - a.clamp(0.001, 0.9999)).abs() < 1e-12);
        if !clipped {
            let direct = raw_cosine(t as f64, steps as f64) / f0;
            assert!((s.alpha_bar(t) - direct).abs() < 1e-9, "t={t}");
        }
    }
    let direct_end = raw_cosine(steps as f64, steps as f64) / f0;
    assert!(direct_end < 1e-3);
    assert!(s.alpha_bar(steps) < 1e-3);
    assert!(cosine_schedule(0).is_err());
}

#[test]
fn first_step_of_a_long_schedule_is_near_identity() {
    let s = cosine_schedule(1000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z0 = gaussian(Extent3::cube(4), 4, 1.0, &mut rng);
    let (zt, eps) = forward_noise(&z0, 1, &s, 3).unwrap();
    assert_eq!(eps.len(), z0.values().len());
    let rel = zt.l2_distance(&z0) / z0.l2_distance(&LatentGrid::zeros(z0.extent(), z0.dim()));
    assert!(rel <= 0.1, "{rel}");
}

#[test]
fn zero_noise_scales_exactly() {
    let s = cosine_schedule(100).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z0 = gaussian(Extent3::cube(2), 3, 1.0, &mut rng);
    for t in [1, 37, 100] {
        let zt = forward_noise_with(&z0, t, &s, &vec![0.0; z0.values().len()]).unwrap();
        let a = s.alpha_bar(t).sqrt();
        for (x, y) in zt.values().iter().zip(z0.values()) {
            assert_eq!(*x, (a * *y as f64) as f32);
        }
    }
}

#[test]
fn forward_noise_rejects_out_of_range_steps() {
    let s = cosine_schedule(10).unwrap();
    let z0 = LatentGrid::zeros(Extent3::cube(1), 1);
    assert!(forward_noise(&z0, 0, &s, 0).is_err());
    assert!(forward_noise(&z0, 11, &s, 0).is_err());
    assert!(forward_noise_with(&z0, 1, &s, &[0.0, 0.0]).is_err());
}

#[test]
fn forward_noise_is_seeded() {
    let s = cosine_schedule(10).unwrap();
    let z0 = latent_from_fn(Extent3::cube(2), 2, |i| i as f32);
    assert_eq!(forward_noise(&z0, 5, &s, 9).unwrap(), forward_noise(&z0, 5, &s, 9).unwrap());
    assert_ne!(forward_noise(&z0, 5, &s, 9).unwrap().0, forward_noise(&z0, 5, &s, 10).unwrap().0);
}

#[test]
fn forward_noise_variance_matches_moments() {
    let s = cosine_schedule(100).unwrap();
    let var0: f64 = 0.25;
    let e = Extent3::cube(2);
    let mut data_rng = ChaCha8Rng::seed_from_u64(11);
    for t in [10, 50, 90] {
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut n = 0.0;
        for seed in 0..10_000u64 {
            let z0 = gaussian(e, 1, var0.sqrt(), &mut data_rng);
            let (zt, _) = forward_noise(&z0, t, &s, seed).unwrap();
            for &v in zt.values() {
                sum += v as f64;
                sq += (v as f64).powi(2);
                n += 1.0;
            }
        }
        let var = sq / n - (sum / n).powi(2);
        let want = s.alpha_bar(t) * var0 + 1.0 - s.alpha_bar(t);
        assert!((var - want).abs() <= 0.05 * want, "t={t}: {var} vs {want}");
    }
}

#[test]
fn oracle_denoiser_collapses_to_the_target() {
    let s = cosine_schedule(100).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z0 = gaussian(Extent3::cube(4), 4, 1.0, &mut rng);
    let cond = Condition::new(z0.clone(), None).unwrap();
    let oracle = |_: &LatentGrid, _: &Condition, _: usize| -> Result<LatentGrid> { Ok(z0.clone()) };
    for seed in 0..3 {
        let out = sample(&oracle, &cond, &s, seed, false).unwrap();
        for (a, b) in out.values().iter().zip(z0.values()) {
            assert!((a - b).abs() <= 1e-5);
        }
    }
}

#[test]
fn zero_denoiser_follows_scalar_recurrence() {
    let s = cosine_schedule(100).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z_t = gaussian(Extent3::cube(2), 2, 1.0, &mut rng);
    let cond = Condition::new(LatentGrid::zeros(z_t.extent(), 2), None).unwrap();
    let zero = |z: &LatentGrid, _: &Condition, _: usize| -> Result<LatentGrid> { Ok(LatentGrid::zeros(z.extent(), z.dim())) };
    let (out, trace) = sample_from(&zero, &cond, &s, z_t.clone(), &mut rng, false).unwrap();

    let start: f64 = z_t.values().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    let mut factor = 1.0f64;
    for (t, z_norm, g_norm) in &trace.rows {
        assert_eq!(*g_norm, 0.0);
        assert!((z_norm - start * factor).abs() <= 1e-5 * start.max(1.0), "t={t}");
        let (a, ab) = (s.alpha(*t), s.alpha_bar(*t));
        factor *= (1.0 / a.sqrt()) * (1.0 - (1.0 - a) / (1.0 - ab));
    }
    assert_eq!(trace.rows.len(), 100);
    for (o, z) in out.values().iter().zip(z_t.values()) {
        assert!((*o as f64 - *z as f64 * factor).abs() <= 1e-5);
    }
}

#[test]
fn gaussian_posterior_mean_sampling_recovers_the_mean() {
    let s = cosine_schedule(100).unwrap();
    let (mu, sigma2) = (0.7f64, 0.25f64);
    let posterior = |z: &LatentGrid, _: &Condition, t: usize| -> Result<LatentGrid> {
        let ab = s.alpha_bar(t);
        let denom = ab * sigma2 + 1.0 - ab;
        Ok(z.map_values(|v| ((ab.sqrt() * sigma2 * v as f64 + (1.0 - ab) * mu) / denom) as f32))
    };
    let cond = Condition::new(LatentGrid::zeros(Extent3::cube(1), 1), None).unwrap();
    let draws: Vec<f64> = (0..1000)
        .map(|seed| sample(&posterior, &cond, &s, seed, false).unwrap().values()[0] as f64)
        .collect();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    assert!((mean - mu).abs() <= 3.0 * se, "mean {mean} se {se}");
}

#[test]
fn reverse_step_tracks_the_estimate_scale() {
    let s = cosine_schedule(100).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g: Vec<f32> = (0..64).map(|_| rng.random_range(-2.0..2.0)).collect();
    for t in [2, 10, 50, 99, 100] {
        let z: Vec<f32> = g.iter().map(|&v| (s.alpha_bar(t).sqrt() * v as f64) as f32).collect();
        let next = reverse_step(&z, &g, t, &s);
        for (n, v) in next.iter().zip(&g) {
            let want = s.alpha_bar(t - 1).sqrt() * *v as f64;
            assert!((*n as f64 - want).abs() <= 1e-5, "t={t}");
        }
    }
}

#[test]
fn random_denoiser_output_shape_and_timestep_sensitivity() {
    let den = small_denoiser(1);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let e = Extent3::cube(4);
    let z = gaussian(e, 2, 1.0, &mut rng);
    let cond = Condition::new(gaussian(e, 2, 1.0, &mut rng), Some(gaussian(e, 2, 1.0, &mut rng))).unwrap();
    let outs: Vec<LatentGrid> = [1, 2, 25, 50, 100].iter().map(|&t| den.predict(&z, &cond, t).unwrap()).collect();
    for (i, a) in outs.iter().enumerate() {
        assert!(a.same_shape(&z));
        for b in &outs[i + 1..] {
            assert_ne!(a, b);
        }
    }
    assert_eq!(den.predict(&z, &cond, 7).unwrap(), den.predict(&z, &cond, 7).unwrap());
}

#[test]
fn mismatched_conditions_are_rejected() {
    let e = Extent3::cube(4);
    assert!(Condition::new(LatentGrid::zeros(e, 2), Some(LatentGrid::zeros(Extent3::cube(2), 2))).is_err());
    assert!(Condition::new(LatentGrid::zeros(e, 2), Some(LatentGrid::zeros(e, 3))).is_err());
    let den = small_denoiser(2);
    let cond = Condition::new(LatentGrid::zeros(e, 2), None).unwrap();
    assert!(den.predict(&LatentGrid::zeros(e, 3), &cond, 1).is_err());
    let odd = Condition::new(LatentGrid::zeros(Extent3::cube(3), 2), None).unwrap();
    assert!(den.predict(&LatentGrid::zeros(Extent3::cube(3), 2), &odd, 1).is_err());
}

#[test]
fn non_finite_models_are_refused() {
    let s = cosine_schedule(10).unwrap();
    let e = Extent3::cube(4);
    let cond = Condition::new(LatentGrid::zeros(e, 2), None).unwrap();
    let bad = |z: &LatentGrid, _: &Condition, _: usize| -> Result<LatentGrid> { Ok(z.map_values(|_| f32::NAN)) };
    assert!(sample(&bad, &cond, &s, 0, false).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("denoiser.xctw");
    small_denoiser(3).save(&path).unwrap();
    let mut named = checkpoint::decode::<f32>(&std::fs::read(&path).unwrap()).unwrap();
    let (_, first) = named.iter_mut().find(|(n, _)| n != "denoiser.config").unwrap();
    *first = Tensor::new(first.shape(), vec![f32::NAN; first.numel()]).unwrap();
    std::fs::write(&path, checkpoint::encode(named.iter().map(|(n, t)| (n.as_str(), t))).unwrap()).unwrap();
    let err = Denoiser::load(&path).unwrap_err().to_string();
    assert!(err.contains("non-finite"), "{err}");
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("denoiser.xctw");
    let den = small_denoiser(4);
    den.save(&path).unwrap();
    let back = Denoiser::load(&path).unwrap();
    assert_eq!(back.config(), den.config());
    let e = Extent3::cube(4);
    let z = latent_from_fn(e, 2, |i| (i as f32 * 0.1).cos());
    let cond = Condition::new(z.clone(), None).unwrap();
    assert_eq!(back.predict(&z, &cond, 3).unwrap(), den.predict(&z, &cond, 3).unwrap());
}

fn toy_data(n: usize, seed: u64) -> Vec<DiffusionExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = Extent3::cube(4);
    (0..n)
        .map(|_| {
            let z0 = gaussian(e, 2, 1.0, &mut rng);
            let z_in = z0.map_values(|v| 0.8 * v);
            let z_new = z0.map_values(|v| -0.5 * v);
            DiffusionExample {
                cond: Condition::new(z_in, Some(z_new)).unwrap(),
                z0,
            }
        })
        .collect()
}

fn blank_conditions(data: &[DiffusionExample]) -> Vec<DiffusionExample> {
    data.iter()
        .map(|ex| {
            let zero = LatentGrid::zeros(ex.z0.extent(), ex.z0.dim());
            DiffusionExample {
                z0: ex.z0.clone(),
                cond: Condition::new(zero.clone(), Some(zero)).unwrap(),
            }
        })
        .collect()
}

#[test]
fn training_on_one_sample_beats_zero_prediction_at_full_noise() {
    let s = cosine_schedule(100).unwrap();
    let data = toy_data(1, 8);
    let cfg = DenoiserTrainConfig {
        epochs: 500,
        lr: 2e-3,
        batch_size: 1,
        seed: 1,
    };
    let (den, curve) = train_denoiser(small_denoiser(5), &data, &s, &cfg).unwrap();
    assert_eq!(curve.steps.len(), 500);
    let zero = |z: &LatentGrid, _: &Condition, _: usize| -> Result<LatentGrid> { Ok(LatentGrid::zeros(z.extent(), z.dim())) };
    let trained = denoising_loss(&den, &data, &s, 100, 3).unwrap();
    let baseline = denoising_loss(&zero, &data, &s, 100, 3).unwrap();
    assert!(trained < baseline, "{trained} vs {baseline}");
}

#[test]
fn conditions_carry_information() {
    let s = cosine_schedule(100).unwrap();
    let cfg = |seed| DenoiserTrainConfig {
        epochs: 8,
        lr: 2e-3,
        batch_size: 4,
        seed,
    };
    let mut wins = 0;
    for seed in 0..3 {
        let train = toy_data(64, 100 + seed);
        let test = toy_data(16, 900 + seed);
        let (with, _) = train_denoiser(small_denoiser(seed), &train, &s, &cfg(seed)).unwrap();
        let (without, _) = train_denoiser(small_denoiser(seed), &blank_conditions(&train), &s, &cfg(seed)).unwrap();
        let a = denoising_loss(&with, &test, &s, 80, seed).unwrap();
        let b = denoising_loss(&without, &blank_conditions(&test), &s, 80, seed).unwrap();
        if b >= a {
            wins += 1;
        }
    }
    assert!(wins >= 2, "{wins}/3");
}

#[test]
fn swapping_conditions_changes_a_trained_model() {
    let s = cosine_schedule(100).unwrap();
    let data = toy_data(8, 12);
    let cfg = DenoiserTrainConfig {
        epochs: 3,
        lr: 2e-3,
        batch_size: 2,
        seed: 0,
    };
    let (den, _) = train_denoiser(small_denoiser(6), &data, &s, &cfg).unwrap();
    let ex = &data[0];
    let swapped = Condition::new(ex.cond.z_new.clone().unwrap(), Some(ex.cond.z_in.clone())).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z = gaussian(ex.z0.extent(), 2, 1.0, &mut rng);
    assert_ne!(den.predict(&z, &ex.cond, 40).unwrap(), den.predict(&z, &swapped, 40).unwrap());
}

#[test]
fn zero_epochs_and_empty_data() {
    let s = cosine_schedule(10).unwrap();
    let cfg = DenoiserTrainConfig {
        epochs: 0,
        ..DenoiserTrainConfig::default()
    };
    let den = small_denoiser(7);
    let (out, curve) = train_denoiser(den.clone(), &toy_data(2, 0), &s, &cfg).unwrap();
    assert!(curve.steps.is_empty());
    let a: Vec<_> = den.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let b: Vec<_> = out.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    assert_eq!(a, b);
    assert!(train_denoiser(den, &[], &s, &DenoiserTrainConfig::default()).is_err());
}

#[test]
fn training_and_sampling_are_deterministic() {
    let s = cosine_schedule(20).unwrap();
    let data = toy_data(4, 3);
    let cfg = DenoiserTrainConfig {
        epochs: 2,
        lr: 1e-3,
        batch_size: 2,
        seed: 4,
    };
    let (a, ca) = train_denoiser(small_denoiser(8), &data, &s, &cfg).unwrap();
    let (b, cb) = train_denoiser(small_denoiser(8), &data, &s, &cfg).unwrap();
    assert_eq!(ca, cb);
    let cond = &data[0].cond;
    let x = sample(&a, cond, &s, 5, false).unwrap();
    assert_eq!(x, sample(&b, cond, &s, 5, false).unwrap());
    assert_ne!(x, sample(&a, cond, &s, 6, false).unwrap());
    assert_ne!(x, sample(&a, cond, &s, 5, true).unwrap());
    let (_, trace) = sample_traced(&a, cond, &s, 5, false).unwrap();
    assert_eq!(trace.to_csv().lines().count(), 21);
}
