//! Cosine schedule, forward noising and the reverse sampler on a toy
//! Gaussian latent, first with the analytic posterior mean and then with a
//! trained denoiser.
//!
//! `cargo run --release --example diffusion`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xct_core::codec::LatentGrid;
use xct_core::diffusion::*;
use xct_core::geometry::Extent3;

fn main() -> xct_core::Result<()> {
    let s = cosine_schedule(100)?;
    for t in [1, 25, 50, 75, 100] {
        println!("t={t:>3}  α={:.4}  ᾱ={:.2e}", s.alpha(t), s.alpha_bar(t));
    }

    let (mu, var) = (0.7f64, 0.25f64);
    let posterior = |z: &LatentGrid, _: &Condition, t: usize| -> xct_core::Result<LatentGrid> {
        let ab = s.alpha_bar(t);
        let k = ab * var + 1.0 - ab;
        Ok(z.map_values(|v| ((ab.sqrt() * var * v as f64 + (1.0 - ab) * mu) / k) as f32))
    };
    let cond = Condition::new(LatentGrid::zeros(Extent3::cube(1), 1), None)?;
    for stochastic in [false, true] {
        let xs: Vec<f64> = (0..500)
            .map(|seed| sample(&posterior, &cond, &s, seed, stochastic).map(|z| z.values()[0] as f64))
            .collect::<Result<_, _>>()?;
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        println!("posterior-mean sampler (stochastic={stochastic}): mean {m:.4} sd {sd:.4}, target N({mu}, {var})");
    }

    // The clean latent is the conditioning latent scaled by -1, so a denoiser
    // that reads its condition can recover it.
    let e = Extent3::cube(4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data: Vec<DiffusionExample> = (0..32)
        .map(|_| {
            let z_in = LatentGrid::new(e, 2, standard_normal(e.voxels() * 2, &mut rng))?;
            Ok(DiffusionExample { z0: z_in.map_values(|v| -v), cond: Condition::new(z_in, None)? })
        })
        .collect::<xct_core::Result<_>>()?;
    let den = Denoiser::new(DenoiserConfig { latent_dim: 2, base_channels: 8 }, 0)?;
    let cfg = DenoiserTrainConfig { epochs: 20, lr: 2e-3, ..DenoiserTrainConfig::default() };
    let (den, curve) = train_denoiser(den, &data, &s, &cfg)?;
    println!(
        "denoiser loss: first epoch {:.4}, last epoch {:.4}",
        curve.epochs[0],
        curve.epochs.last().copied().unwrap_or(f32::NAN)
    );
    let probe = &data[0];
    let z = sample(&den, &probe.cond, &s, 1, false)?;
    let zero = LatentGrid::zeros(e, 2);
    println!(
        "sampled latent: distance to target {:.3} (zero guess {:.3})",
        z.l2_distance(&probe.z0),
        zero.l2_distance(&probe.z0)
    );
    Ok(())
}
