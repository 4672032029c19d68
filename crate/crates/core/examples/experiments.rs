//! View-count sweep, variant ablation and new-view angle grid on a small
//! training run. Prints per-configuration summaries as CSV.
//!
//! `cargo run --release --example experiments [sweep|ablation|angles]`

use xct_core::geometry::{Extent3, ViewParams, ViewRange};
use xct_core::phantom::{make_split, PhantomSpec};
use xct_core::pipeline::*;

fn main() -> xct_core::Result<()> {
    let kind = std::env::args().nth(1).unwrap_or_else(|| "sweep".into());
    let grid = Extent3::cube(32);
    let views = [ViewParams::new(0.0, grid)?, ViewParams::new(90.0, grid)?];
    let (train, test) = make_split(30, 4, &PhantomSpec::default(), &views, 0.0, 4)?;
    let ranges = [ViewRange::from_degrees(90)?, ViewRange::from_degrees(360)?];
    let counts = [1, 2, 3];

    let labelled = match kind.as_str() {
        "sweep" => sweep_arms(&counts, &ranges)?,
        "ablation" => ablation_arms(),
        "angles" => angle_arms(),
        other => {
            eprintln!("unknown experiment `{other}`; use sweep, ablation or angles");
            std::process::exit(1);
        }
    };
    let mut arms: Vec<Arm> = Vec::new();
    for (_, a) in &labelled {
        if !arms.contains(a) {
            arms.push(a.clone());
        }
    }
    let plan = TrainPlan {
        ct_epochs: 10,
        bp_epochs: 6,
        mapper_epochs: 10,
        denoiser_epochs: 6,
        ..TrainPlan::default()
    };
    println!("training {} denoisers", arms.len());
    let (set, _) = train_model_set(&train, &arms, &plan, |m| println!("  {m}"))?;

    let opts = EvalOptions::default();
    let report = match kind.as_str() {
        "sweep" => view_sweep(&counts, &ranges, &set, &test, 0, opts)?,
        "ablation" => ablation_suite(&set, &test, 0, opts)?,
        _ => angle_suite(&set, &test, 0, opts)?,
    };
    print!("{}", report.summary_csv());
    Ok(())
}
