//! Trains a desk-scale model set and reconstructs held-out phantoms from
//! one view, two views, and two views plus a synthesized third.
//!
//! `cargo run --release --example reconstruct [models_dir]`

use std::path::PathBuf;

use xct_core::geometry::{Extent3, ViewParams};
use xct_core::io::write_slices;
use xct_core::phantom::{make_split, PhantomSpec};
use xct_core::pipeline::*;

fn main() -> xct_core::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("xct_models"));
    let grid = Extent3::cube(32);
    let views = [ViewParams::new(0.0, grid)?, ViewParams::new(90.0, grid)?];
    let (train, test) = make_split(40, 4, &PhantomSpec::default(), &views, 0.0, 3)?;
    let arms = [
        Arm::new(Variant::Vpge, vec![0.0], vec![])?,
        Arm::new(Variant::Vpge, vec![0.0, 90.0], vec![])?,
        Arm::new(Variant::Dvg, vec![0.0, 90.0], vec![45.0])?,
    ];
    let plan = TrainPlan {
        ct_epochs: 15,
        bp_epochs: 10,
        mapper_epochs: 15,
        denoiser_epochs: 15,
        ..TrainPlan::default()
    };

    let set = match ModelSet::load(&dir, &arms, plan.timesteps) {
        Ok(set) => set,
        Err(_) => {
            let (set, _) = train_model_set(&train, &arms, &plan, |m| println!("{m}"))?;
            set.save(&dir)?;
            set
        }
    };

    for arm in &arms {
        let report = evaluate_arm(&arm.name(), arm, &set, &test, 0, EvalOptions::default(), |s, v| {
            write_slices(&dir, &format!("{}_sample{}", arm.name(), s.index), v)
        })?;
        let row = &report.summary()[0];
        println!("{:<20} PSNR {:.2} dB  SSIM {:.3}", row.config, row.mean_psnr_db, row.mean_ssim);
    }

    let m = set.models_for(&arms[2])?;
    let v = reconstruct(&views_for(&test[0], &[0.0, 90.0])?, m, true, &[45.0], 7)?;
    println!("sample {} via reconstruct(): PSNR {:.2} dB", test[0].index, psnr(&v, &test[0].volume)?);
    println!("models and slices in {}", dir.display());
    Ok(())
}
