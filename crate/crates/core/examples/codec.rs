//! Trains a small VQ autoencoder on phantoms and reports round-trip error.
//!
//! `cargo run --release --example codec [epochs]`

use xct_core::codec::{codebook_usage, round_trip_mse, train_codec, CodecConfig, CodecTrainConfig, VqAutoencoder};
use xct_core::phantom::{make_split, PhantomSpec};

fn main() -> xct_core::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(15);
    let (train, test) = make_split(40, 8, &PhantomSpec::default(), &[], 0.0, 1)?;
    let train: Vec<_> = train.into_iter().map(|s| s.volume).collect();
    let test: Vec<_> = test.into_iter().map(|s| s.volume).collect();

    let config = CodecConfig::default();
    let ae = VqAutoencoder::new(config, 0)?;
    println!("untrained: held-out MSE {:.4}", round_trip_mse(&ae, &test)?);
    let (ae, curve) = train_codec(ae, &train, &CodecTrainConfig { epochs, ..CodecTrainConfig::default() })?;
    for (i, l) in curve.epochs.iter().enumerate().step_by(5.max(epochs / 5)) {
        println!("epoch {:>3}: loss {l:.5}", i + 1);
    }
    let z = ae.encode(&test[0])?;
    println!(
        "latent grid {:?}×{}, downsampling {}×",
        z.extent().as_array(),
        z.dim(),
        ae.factor()
    );
    println!(
        "trained: held-out MSE {:.4}, {}/{} codes used",
        round_trip_mse(&ae, &test)?,
        codebook_usage(&ae, &test)?,
        config.codebook_size
    );
    Ok(())
}
