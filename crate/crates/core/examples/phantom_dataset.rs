//! Writes a small train/test phantom dataset in the on-disk layout the CLI reads.
//!
//! `cargo run --release --example phantom_dataset [out_dir]`

use std::path::PathBuf;

use xct_core::geometry::{Extent3, ViewParams};
use xct_core::phantom::{make_dataset, write_dataset, Dataset, Manifest, PhantomSpec};

fn main() -> xct_core::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("xct_dataset"));
    let spec = PhantomSpec::default();
    let angles = vec![0.0, 90.0];
    let grid = Extent3::cube(spec.extent);
    let views: Vec<ViewParams> = angles.iter().map(|&a| ViewParams::new(a, grid)).collect::<Result<_, _>>()?;
    let samples = make_dataset(10, &spec, &views, 0.0, 11)?;
    let manifest = Manifest {
        count: samples.len(),
        test_count: 2,
        extent: spec.extent,
        views: angles,
        noise_sigma: 0.0,
        seed: 11,
        phantom: spec.clone(),
    };
    if out.exists() {
        std::fs::remove_dir_all(&out)?;
    }
    std::fs::create_dir_all(&out)?;
    write_dataset(&out, &manifest, &samples)?;

    let ds = Dataset::open(&out)?;
    for i in ds.test_indices() {
        let s = ds.load(i)?;
        let nonzero = s.volume.data().iter().filter(|&&v| v > 0.0).count();
        println!("test sample {i}: {} views, {nonzero} tissue voxels", s.projections.len());
    }
    println!("{} samples in {}", samples.len(), out.display());
    Ok(())
}
