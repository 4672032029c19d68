use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xct_core::geometry::*;
use xct_tensor::{gradcheck, Tape, Tensor};

mod common;
use common::{dense_oracle, random_volume};

#[test]
fn forward_projection_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = Extent3::cube(4);
    for angle in [0.0, 30.0, 90.0, 137.0, 180.0, 300.0] {
        let view = ViewParams::new(angle, g).unwrap();
        let (rows, cols, a) = dense_oracle(&view);
        for _ in 0..3 {
            let v = random_volume(g, &mut rng);
            let p = forward_project(&v, &view).unwrap();
            for px in 0..rows * cols {
                let want: f64 = (0..g.voxels())
                    .map(|k| a[px * g.voxels() + k] * v.data()[k] as f64)
                    .sum();
                assert!((p.data()[px] as f64 - want).abs() <= 1e-5, "angle {angle} px {px}");
            }
        }
    }
}

#[test]
fn one_hot_columns_match_oracle() {
    let g = Extent3::cube(4);
    let view = ViewParams::new(60.0, g).unwrap();
    let (rows, cols, a) = dense_oracle(&view);
    for k in 0..g.voxels() {
        let mut data = vec![0.0; g.voxels()];
        data[k] = 1.0;
        let p = forward_project(&Volume::new(g, data).unwrap(), &view).unwrap();
        for px in 0..rows * cols {
            assert!((p.data()[px] as f64 - a[px * g.voxels() + k]).abs() <= 1e-5);
        }
    }
}

#[test]
fn adjoint_inner_product_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = Extent3::cube(8);
    for _ in 0..10 {
        let view = ViewParams::new(rng.random_range(0.0..360.0), g).unwrap();
        let v = random_volume(g, &mut rng);
        let (rows, cols) = view.detector();
        let img = Projection::new(
            view.clone(),
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let fp = forward_project(&v, &view).unwrap();
        let bt = back_project(&img, BackProjection::Adjoint).unwrap();
        let lhs: f64 = fp.data().iter().zip(img.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        let rhs: f64 = v.data().iter().zip(bt.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(rhs.abs()), "{lhs} vs {rhs}");
    }
}

#[test]
fn zero_inputs_give_zero_outputs() {
    let g = Extent3::cube(6);
    let view = ViewParams::new(33.0, g).unwrap();
    assert!(forward_project(&Volume::zeros(g), &view).unwrap().data().iter().all(|&x| x == 0.0));
    let (r, c) = view.detector();
    let img = Projection::new(view, vec![0.0; r * c]).unwrap();
    for flavor in [BackProjection::Normalized, BackProjection::Adjoint] {
        assert!(back_project(&img, flavor).unwrap().data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn projection_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = Extent3::cube(8);
    let view = ViewParams::new(71.0, g).unwrap();
    let (v1, v2) = (random_volume(g, &mut rng), random_volume(g, &mut rng));
    let (a, b) = (0.7f32, -1.3f32);
    let mix: Vec<f32> = v1.data().iter().zip(v2.data()).map(|(x, y)| a * x + b * y).collect();
    let lhs = forward_project(&Volume::new(g, mix).unwrap(), &view).unwrap();
    let p1 = forward_project(&v1, &view).unwrap();
    let p2 = forward_project(&v2, &view).unwrap();
    for i in 0..lhs.data().len() {
        let want = a as f64 * p1.data()[i] as f64 + b as f64 * p2.data()[i] as f64;
        assert!((lhs.data()[i] as f64 - want).abs() <= 1e-5 * want.abs().max(1.0));
    }
}

/// Rotation of every axial slice into the AP frame of a view at `quarters`·90°.
fn rotate_to_ap(v: &Volume, quarters: usize) -> Volume {
    let e = v.extent();
    let n = e.h;
    let mut cur = v.data().to_vec();
    for _ in 0..quarters {
        let mut next = vec![0.0; cur.len()];
        for d in 0..e.d {
            for h in 0..n {
                for w in 0..n {
                    next[(d * n + h) * n + w] = cur[(d * n + (n - 1 - w)) * n + h];
                }
            }
        }
        cur = next;
    }
    Volume::new(e, cur).unwrap()
}

#[test]
fn rotation_consistency_at_grid_angles() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = Extent3::cube(8);
    let v = random_volume(g, &mut rng);
    let ap = ViewParams::new(0.0, g).unwrap();
    for (angle, q) in [(90.0, 1), (180.0, 2)] {
        let rotated = forward_project(&v, &ViewParams::new(angle, g).unwrap()).unwrap();
        let reference = forward_project(&rotate_to_ap(&v, q), &ap).unwrap();
        for (a, b) in rotated.data().iter().zip(reference.data()) {
            assert!((a - b).abs() <= 1e-2 * b.abs().max(1e-3), "{angle}: {a} vs {b}");
        }
    }
}

#[test]
fn constant_image_back_projects_to_c_over_ray_length() {
    let g = Extent3::cube(4);
    let view = ViewParams::new(0.0, g).unwrap();
    assert_eq!(view.ray_length(), 4.0);
    let img = Projection::new(view, vec![0.8; 16]).unwrap();
    let v = back_project(&img, BackProjection::Normalized).unwrap();
    for &x in v.data() {
        assert!((x - 0.2).abs() < 1e-6);
    }
}

#[test]
fn multi_back_projection_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = Extent3::cube(8);
    let v = random_volume(g, &mut rng);
    let p = forward_project(&v, &ViewParams::new(20.0, g).unwrap()).unwrap();
    let single = back_project(&p, BackProjection::Normalized).unwrap();
    assert_eq!(back_project_multi(std::slice::from_ref(&p)).unwrap(), single);
    let twice = back_project_multi(&[p.clone(), p]).unwrap();
    for (a, b) in twice.data().iter().zip(single.data()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn biplanar_back_projection_peaks_at_blob() {
    let g = Extent3::cube(16);
    let center = [7.0, 4.0, 11.0];
    let mut data = vec![0.0; g.voxels()];
    for d in 0..16 {
        for h in 0..16 {
            for w in 0..16 {
                let r2 = (d as f64 - center[0]).powi(2) + (h as f64 - center[1]).powi(2) + (w as f64 - center[2]).powi(2);
                if r2 <= 4.0 {
                    data[(d * 16 + h) * 16 + w] = 1.0;
                }
            }
        }
    }
    let v = Volume::new(g, data).unwrap();
    let imgs: Vec<Projection> = [0.0, 90.0]
        .iter()
        .map(|&a| forward_project(&v, &ViewParams::new(a, g).unwrap()).unwrap().normalized())
        .collect();
    let sum = back_project_multi(&imgs).unwrap();
    let ap = back_project(&imgs[0], BackProjection::Normalized).unwrap();
    let lat = back_project(&imgs[1], BackProjection::Normalized).unwrap();
    let argmax = |f: &dyn Fn(usize) -> f64| (0..g.voxels()).max_by(|&a, &b| f(a).total_cmp(&f(b))).unwrap();
    let coords = |i: usize| [(i / 256) as f64, (i / 16 % 16) as f64, (i % 16) as f64];
    let peak = coords(argmax(&|i| sum.data()[i] as f64));
    let oracle = coords(argmax(&|i| ap.data()[i] as f64 * lat.data()[i] as f64));
    for k in 0..3 {
        assert!((peak[k] - oracle[k]).abs() <= 1.0, "{peak:?} vs {oracle:?}");
        assert!((peak[k] - center[k]).abs() <= 1.0, "{peak:?} vs blob {center:?}");
    }
}

#[test]
fn projection_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (angle, n) in [(35.0, 4), (90.0, 4), (200.0, 5)] {
        let g = Extent3::cube(n);
        let view = ViewParams::new(angle, g).unwrap();
        let (r, c) = view.detector();
        let target = Tensor::<f64>::randn(&[r, c], 1.0, &mut rng);
        let x0 = Tensor::<f64>::randn(&[n, n, n], 1.0, &mut rng);
        let report = gradcheck::check(
            "fp_mse",
            &[x0],
            &move |tape: &mut Tape<f64>, xs| {
                let y = forward_project_var(tape, xs[0], &view).map_err(|e| xct_tensor::TensorError::Argument { op: "forward_project", detail: e.to_string() })?;
                let t = tape.constant(target.clone());
                tape.mse(y, t)
            },
            &mut rng,
        )
        .unwrap();
        assert!(report.passes(1e-3), "{report:?}");
    }
}

#[test]
fn back_projection_rejects_mismatched_grids() {
    let a = forward_project(&Volume::zeros(Extent3::cube(4)), &ViewParams::new(0.0, Extent3::cube(4)).unwrap()).unwrap();
    let b = forward_project(&Volume::zeros(Extent3::cube(6)), &ViewParams::new(0.0, Extent3::cube(6)).unwrap()).unwrap();
    assert!(back_project_multi(&[a, b]).is_err());
    assert!(forward_project(&Volume::zeros(Extent3::cube(4)), &ViewParams::new(0.0, Extent3::cube(5)).unwrap()).is_err());
}

#[test]
fn uniform_view_sets() {
    assert_eq!(uniform_view_angles(2, ViewRange::Quarter).unwrap(), vec![0.0, 90.0]);
    assert_eq!(uniform_view_angles(3, ViewRange::Quarter).unwrap(), vec![0.0, 45.0, 90.0]);
    assert_eq!(uniform_view_angles(3, ViewRange::Full).unwrap(), vec![0.0, 120.0, 240.0]);
    let set = uniform_view_set(4, ViewRange::Quarter, Extent3::cube(8)).unwrap();
    assert_eq!(set.len(), 4);
    assert_eq!(set[3].angle_deg(), 90.0);
}
