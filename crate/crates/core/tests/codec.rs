use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xct_core::codec::*;
use xct_core::geometry::{Extent3, Volume};
use xct_core::phantom::{generate_phantom, PhantomSpec};
use xct_tensor::{checkpoint, Tape, Tensor};

fn random_latent(e: Extent3, dim: usize, rng: &mut ChaCha8Rng) -> LatentGrid {
    LatentGrid::new(e, dim, (0..e.voxels() * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_codebook(k: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(&[k, dim], (0..k * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn position(z: &LatentGrid, p: usize) -> Vec<f64> {
    let n = z.positions();
    (0..z.dim()).map(|j| z.values()[j * n + p] as f64).collect()
}

fn dist2(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - *y as f64).powi(2)).sum()
}

#[test]
fn quantization_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let z = random_latent(Extent3::cube(4), 4, &mut rng);
        let cb = random_codebook(64, 4, &mut rng);
        let q = quantize(&z, &cb).unwrap();
        let codes = q.codes().unwrap();
        for p in 0..z.positions() {
            let x = position(&z, p);
            let mut best = 0;
            for k in 1..64 {
                if dist2(&x, &cb.data()[k * 4..k * 4 + 4]) < dist2(&x, &cb.data()[best * 4..best * 4 + 4]) {
                    best = k;
                }
            }
            assert_eq!(codes[p], best);
            let qp = position(&q, p);
            assert_eq!(qp, cb.data()[best * 4..best * 4 + 4].iter().map(|&v| v as f64).collect::<Vec<_>>());
        }
    }
}

#[test]
fn quantization_is_idempotent_and_never_farther() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = random_latent(Extent3::cube(3), 3, &mut rng);
    let cb = random_codebook(8, 3, &mut rng);
    let q = quantize(&z, &cb).unwrap();
    let plain = LatentGrid::new(q.extent(), q.dim(), q.values().to_vec()).unwrap();
    assert_eq!(quantize(&plain, &cb).unwrap().codes(), q.codes());
    for p in 0..z.positions() {
        let x = position(&z, p);
        let d = dist2(&x, &position(&q, p).iter().map(|&v| v as f32).collect::<Vec<_>>());
        for k in 0..8 {
            assert!(d <= dist2(&x, &cb.data()[k * 3..k * 3 + 3]));
        }
    }
}

#[test]
fn straight_through_copies_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = [1, 4, 2, 2, 2];
    let ze = Tensor::<f32>::randn(&shape, 1.0, &mut rng);
    let zq = Tensor::randn(&shape, 1.0, &mut rng);
    let target = Tensor::randn(&shape, 1.0, &mut rng);

    let mut tape = Tape::new();
    let e = tape.leaf(ze);
    let q = tape.constant(zq.clone());
    let st = tape.straight_through(e, q).unwrap();
    let t = tape.constant(target.clone());
    let loss = tape.mse(st, t).unwrap();
    let g_encoder = tape.backward(loss).unwrap().get(e).unwrap().to_vec();

    let mut tape = Tape::new();
    let q = tape.leaf(zq);
    let t = tape.constant(target);
    let loss = tape.mse(q, t).unwrap();
    let g_quantized = tape.backward(loss).unwrap().get(q).unwrap().to_vec();
    assert_eq!(g_encoder, g_quantized);
}

fn phantoms(n: usize, extent: usize, seed0: u64) -> Vec<Volume> {
    let spec = PhantomSpec {
        extent,
        ..PhantomSpec::default()
    };
    (0..n).map(|i| generate_phantom(&spec.with_seed(seed0 + i as u64)).unwrap()).collect()
}

#[test]
fn encode_decode_shapes_and_determinism() {
    let ae = VqAutoencoder::new(CodecConfig::default(), 4).unwrap();
    let v = &phantoms(1, 32, 0)[0];
    let z = ae.encode(v).unwrap();
    assert_eq!((z.extent(), z.dim()), (Extent3::cube(4), 4));
    assert_eq!(z, ae.encode(v).unwrap());
    let r = ae.round_trip(v).unwrap();
    assert_eq!(r.extent(), v.extent());
    assert!(r.data().iter().all(|x| (0.0..=1.0).contains(x)));
}

#[test]
fn zero_codebook_decodes_every_code_alike() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.xctw");
    VqAutoencoder::new(CodecConfig::default(), 5).unwrap().save(&path).unwrap();
    let mut named = checkpoint::decode::<f32>(&std::fs::read(&path).unwrap()).unwrap();
    for (name, t) in named.iter_mut() {
        if name == "codebook" {
            *t = Tensor::zeros(t.shape());
        }
    }
    let ae = VqAutoencoder::from_named(named).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let zero = ae.decode_raw(&LatentGrid::zeros(Extent3::cube(2), 4)).unwrap();
    for _ in 0..3 {
        assert_eq!(ae.decode_raw(&random_latent(Extent3::cube(2), 4, &mut rng)).unwrap(), zero);
    }
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ct_codec.xctw");
    let mut ae = VqAutoencoder::new(CodecConfig::default(), 6).unwrap();
    ae.set_latent_scale(0.37).unwrap();
    ae.save(&path).unwrap();
    let back = VqAutoencoder::load(&path).unwrap();
    assert_eq!(back.latent_scale(), 0.37);
    let v = &phantoms(1, 32, 3)[0];
    assert_eq!(back.round_trip(v).unwrap(), ae.round_trip(v).unwrap());

    let bad = dir.path().join("bad.xctw");
    std::fs::write(&bad, b"NOPE").unwrap();
    let err = VqAutoencoder::load(&bad).unwrap_err().to_string();
    assert!(err.contains("bad.xctw"), "{err}");
}

#[test]
fn zero_epochs_returns_initialization() {
    let ae = VqAutoencoder::new(CodecConfig::default(), 7).unwrap();
    let data = phantoms(2, 32, 0);
    let cfg = CodecTrainConfig {
        epochs: 0,
        ..CodecTrainConfig::default()
    };
    let (out, curve) = train_codec(ae.clone(), &data, &cfg).unwrap();
    assert!(curve.steps.is_empty());
    let a: Vec<_> = ae.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let b: Vec<_> = out.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    assert_eq!(a, b);
    assert!(train_codec(ae, &[], &cfg).is_err());
}

#[test]
fn training_beats_initialization_on_held_out_phantoms() {
    let config = CodecConfig {
        base_channels: 8,
        ..CodecConfig::default()
    };
    let train = phantoms(48, 16, 100);
    let test = phantoms(6, 16, 900);
    let ae = VqAutoencoder::new(config, 8).unwrap();
    let before = round_trip_mse(&ae, &test).unwrap();
    let cfg = CodecTrainConfig {
        epochs: 6,
        lr: 1e-3,
        ..CodecTrainConfig::default()
    };
    let (trained, curve) = train_codec(ae, &train, &cfg).unwrap();
    let after = round_trip_mse(&trained, &test).unwrap();
    assert_eq!(curve.steps.len(), 6 * 24);
    assert!(after < before, "{after} vs {before}");
    assert!(trained.is_finite());
    assert!(codebook_usage(&trained, &test).unwrap() >= 2);
}
