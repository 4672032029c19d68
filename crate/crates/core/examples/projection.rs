//! Forward and back projection of a phantom, written as PGM images.
//!
//! `cargo run --release --example projection [out_dir]`

use std::path::PathBuf;

use xct_core::geometry::{back_project, back_project_multi, forward_project, BackProjection, ViewParams};
use xct_core::io::{encode_pgm16, write_atomic, write_slices};
use xct_core::phantom::{generate_phantom, PhantomSpec};

fn main() -> xct_core::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("xct_projection"));
    std::fs::create_dir_all(&out)?;
    let volume = generate_phantom(&PhantomSpec { seed: 3, ..PhantomSpec::default() })?;
    write_slices(&out, "phantom", &volume)?;

    let mut images = Vec::new();
    for angle in [0.0, 45.0, 90.0] {
        let view = ViewParams::new(angle, volume.extent())?;
        let p = forward_project(&volume, &view)?;
        let peak = p.data().iter().cloned().fold(0.0f32, f32::max);
        println!("{angle:>5}°: {}×{} detector, peak line integral {peak:.3}", p.rows(), p.cols());
        let shown = p.clone().normalized();
        write_atomic(&out.join(format!("drr_{angle:03}.pgm")), &encode_pgm16(shown.cols(), shown.rows(), shown.data()))?;
        images.push(p);
    }

    let smear = back_project(&images[0], BackProjection::Normalized)?;
    write_slices(&out, "bp_ap", &smear)?;
    let fused = back_project_multi(&images)?;
    write_slices(&out, "bp_fused", &fused)?;
    println!("mean of fused back projection {:.4}, phantom {:.4}", fused.mean(), volume.mean());
    println!("images in {}", out.display());
    Ok(())
}
