//! Synthesizes an unseen X-ray from AP and lateral inputs through the
//! 2D → 3D → 2D chain and compares it with the true projection.
//!
//! `cargo run --release --example new_view [angle]`

use xct_core::geometry::{Extent3, ViewParams};
use xct_core::io::{encode_pgm16, write_atomic};
use xct_core::phantom::{make_split, PhantomSpec};
use xct_core::pipeline::*;

fn main() -> xct_core::Result<()> {
    let angle: f64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(45.0);
    let grid = Extent3::cube(32);
    let views = [ViewParams::new(0.0, grid)?, ViewParams::new(90.0, grid)?];
    let (train, test) = make_split(40, 4, &PhantomSpec::default(), &views, 0.0, 2)?;

    let plan = TrainPlan { ct_epochs: 15, bp_epochs: 10, mapper_epochs: 20, ..TrainPlan::default() };
    let arm = Arm::new(Variant::Dvg, vec![0.0, 90.0], vec![angle])?;
    let (ct, _) = train_ct_codec(plan.new_ct_codec()?, &train, &plan.codec_train(plan.ct_epochs, "ct.train"))?;
    let (bp, _) = train_bp_codec(plan.new_bp_codec()?, &train, &[arm.clone()], &plan.codec_train(plan.bp_epochs, "bp.train"))?;
    let pairs = mapper_pairs(&train, &[arm], &bp, &ct)?;
    let (mapper, curve) = train_latent_mapper(plan.new_mapper()?, &pairs, &plan.mapper_train())?;
    println!("mapper loss {:.4} -> {:.4}", curve.epochs[0], curve.epochs.last().unwrap());

    let synth = SynthesisModels { ct_codec: &ct, bp_codec: &bp, mapper: Some(&mapper) };
    let out = std::env::temp_dir().join("xct_new_view");
    std::fs::create_dir_all(&out)?;
    for s in &test {
        let inputs = views_for(s, &[0.0, 90.0])?;
        let truth = &views_for(s, &[angle])?[0];
        let (img, init) = synthesize_new_view(&inputs, angle, synth)?;
        println!(
            "sample {}: r = {:.3} against the true {angle}° view, initial volume PSNR {:.2} dB",
            s.index,
            pearson(img.data(), truth.data()),
            psnr(&init, &s.volume)?
        );
        write_atomic(&out.join(format!("sample{}_synth.pgm", s.index)), &encode_pgm16(img.cols(), img.rows(), img.data()))?;
        write_atomic(&out.join(format!("sample{}_true.pgm", s.index)), &encode_pgm16(truth.cols(), truth.rows(), truth.data()))?;
    }
    println!("images in {}", out.display());
    Ok(())
}
