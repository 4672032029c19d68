use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xct_tensor::{checkpoint, gradcheck, ParamStore, Tape, Tensor};

#[test]
fn every_op_matches_finite_differences() {
    let reports = gradcheck::op_suite(11).unwrap();
    let mut shapes_per_op: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &reports {
        assert!(r.passes(1e-3), "{} {:?}: rel error {:e}", r.op, r.shape, r.rel_error);
        *shapes_per_op.entry(r.op.as_str()).or_default() += 1;
    }
    for (op, n) in shapes_per_op {
        assert!(n >= 5, "{op} checked on only {n} shapes");
    }
}

#[test]
fn conv_unit_kernel_scales() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(&[1, 1, 1, 1, 1], 1.0));
    let w = tape.constant(Tensor::full(&[1, 1, 1, 1, 1], 2.0));
    let y = tape.conv3d(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 1, 1, 1]);
    assert_eq!(tape.value(y).data(), &[2.0]);
}

#[test]
fn zero_input_gives_zero_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4, 4]));
    let w = tape.constant(Tensor::randn(&[3, 2, 3, 3, 3], 1.0, &mut rng));
    let y = tape.conv3d(x, w, None, 2, 1).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    let wt = tape.constant(Tensor::randn(&[2, 3, 2, 2, 2], 1.0, &mut rng));
    let z = tape.transposed_conv3d(x, wt, None, 2, 0).unwrap();
    assert_eq!(tape.shape(z), &[1, 3, 8, 8, 8]);
    assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
}

#[test]
fn transposed_expands_single_voxel() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(&[1, 1, 1, 1, 1], 3.5));
    let w = tape.constant(Tensor::full(&[1, 1, 2, 2, 2], 1.0));
    let y = tape.transposed_conv3d(x, w, None, 2, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 2, 2, 2]);
    assert_eq!(tape.value(y).data(), &[3.5; 8]);
}

#[test]
fn conv_gradient_matches_finite_differences_on_spec_shape() {
    // 1×2×4³ input, 3³ kernel, d sum(out)/d input.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f64>::randn(&[1, 2, 4, 4, 4], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(&[1, 2, 3, 3, 3], 1.0, &mut rng);
    let sum_out = |x: &Tensor<f64>| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let y = tape.conv3d(xv, wv, None, 1, 0).unwrap();
        tape.value(y).data().iter().sum::<f64>()
    };
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let wv = tape.constant(w.clone());
    let y = tape.conv3d(xv, wv, None, 1, 0).unwrap();
    let n = tape.value(y).numel() as f64;
    let m = tape.mean(y);
    let loss = tape.affine(m, n, 0.0);
    let grads = tape.backward(loss).unwrap();
    let analytic = grads.get(xv).unwrap();
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for j in 0..x.numel() {
        let mut p = x.clone();
        p.data_mut()[j] += 1e-6;
        let mut q = x.clone();
        q.data_mut()[j] -= 1e-6;
        let fd = (sum_out(&p) - sum_out(&q)) / 2e-6;
        num += (fd - analytic[j]).powi(2);
        den += fd.powi(2);
    }
    assert!(num.sqrt() / den.sqrt() <= 1e-3);
}

#[test]
fn transposed_conv_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (ci, co, ext, k) in [(2, 3, [5, 4, 6], 3), (1, 1, [4, 4, 4], 3), (3, 2, [3, 3, 3], 1), (2, 2, [6, 6, 6], 5)] {
        let x = Tensor::<f64>::randn(&[1, ci, ext[0], ext[1], ext[2]], 1.0, &mut rng);
        let y = Tensor::<f64>::randn(&[1, co, ext[0], ext[1], ext[2]], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[co, ci, k, k, k], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (xv, yv, wv) = (tape.constant(x.clone()), tape.constant(y.clone()), tape.constant(w));
        let cx = tape.conv3d(xv, wv, None, 1, k / 2).unwrap();
        let ty = tape.transposed_conv3d(yv, wv, None, 1, k / 2).unwrap();
        let lhs = tape.value(cx).dot(&y);
        let rhs = x.dot(tape.value(ty));
        assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(rhs.abs()), "{lhs} vs {rhs}");
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f64>::randn(&[1, 4, 3, 3, 3], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(&[4, 4, 3, 3, 3], 0.3, &mut rng);
    let target = Tensor::<f64>::randn(&[1, 4, 3, 3, 3], 1.0, &mut rng);
    let gamma = Tensor::<f64>::full(&[4], 1.0);
    let beta = Tensor::<f64>::zeros(&[4]);

    let run = |which: u8| {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let (g, b) = (tape.constant(gamma.clone()), tape.constant(beta.clone()));
        let t = tape.constant(target.clone());
        let h = tape.conv3d(xv, wv, None, 1, 1).unwrap();
        let h = tape.group_norm(h, g, b, 4).unwrap();
        let h = tape.silu(h);
        let l1 = tape.mse(h, t).unwrap();
        let l2 = tape.mean(h);
        let loss = match which {
            1 => l1,
            2 => l2,
            _ => tape.add(l1, l2).unwrap(),
        };
        let g = tape.backward(loss).unwrap();
        (g.get(xv).unwrap().to_vec(), g.get(wv).unwrap().to_vec())
    };
    let (a, b, s) = (run(1), run(2), run(3));
    for i in 0..a.0.len() {
        assert!((a.0[i] + b.0[i] - s.0[i]).abs() < 1e-12);
    }
    for i in 0..a.1.len() {
        assert!((a.1[i] + b.1[i] - s.1[i]).abs() < 1e-12);
    }
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::<f32>::randn(&[2, 3, 6, 6, 6], 1.0, &mut rng);
    let w = Tensor::<f32>::randn(&[5, 3, 3, 3, 3], 1.0, &mut rng);
    let run = || {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let y = tape.conv3d(xv, wv, None, 2, 1).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn straight_through_copies_gradient_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut tape = Tape::<f32>::new();
    let z = tape.leaf(Tensor::randn(&[1, 2, 2, 2, 2], 1.0, &mut rng));
    let table = tape.constant(Tensor::randn(&[4, 2], 1.0, &mut rng));
    let codes = [0, 1, 2, 3, 3, 2, 1, 0];
    let q = tape.embedding(table, &codes, &[1, 2, 2, 2]).unwrap();
    let st = tape.straight_through(z, q).unwrap();
    assert_eq!(tape.value(st), tape.value(q));
    let w = tape.constant(Tensor::randn(&[3, 2, 3, 3, 3], 1.0, &mut rng));
    let y = tape.conv3d(st, w, None, 1, 1).unwrap();
    let loss = tape.mean(y);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(z).unwrap(), g.get(st).unwrap());
}

proptest! {
    #[test]
    fn checkpoint_round_trips(
        tensors in prop::collection::vec(
            (prop::collection::vec(1usize..4, 0..4), any::<u64>()),
            0..5,
        )
    ) {
        let mut store = ParamStore::<f32>::new();
        for (i, (shape, seed)) in tensors.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            store.add(format!("t{i}.weight"), Tensor::randn(shape, 1.0, &mut rng)).unwrap();
        }
        let mut bytes = Vec::new();
        checkpoint::write_store(&store, &mut bytes).unwrap();
        let named = checkpoint::read_named::<f32, _>(bytes.as_slice()).unwrap();
        let mut restored = store.clone();
        restored.load_named(named).unwrap();
        prop_assert_eq!(restored, store);
    }
}
