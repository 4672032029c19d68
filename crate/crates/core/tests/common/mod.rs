#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use xct_core::geometry::{Extent3, ViewParams, Volume};

pub fn random_volume(e: Extent3, rng: &mut ChaCha8Rng) -> Volume {
    Volume::new(e, (0..e.voxels()).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// Dense matrix of the projector built from the view matrix alone: for every
/// pixel and ray sample, map the ray-frame point back to voxel space and
/// bilinearly weight the neighbouring voxels of that slice.
pub fn dense_oracle(view: &ViewParams) -> (usize, usize, Vec<f64>) {
    let g = view.grid();
    let (rows, cols) = view.detector();
    let m = view.matrix();
    let center = [(g.d as f64 - 1.0) / 2.0, (g.h as f64 - 1.0) / 2.0, (g.w as f64 - 1.0) / 2.0];
    let cu = (cols as f64 - 1.0) / 2.0;
    let l = view.samples_per_ray();
    let mut a = vec![0.0; rows * cols * g.voxels()];
    for row in 0..rows {
        for col in 0..cols {
            for j in 0..l {
                let q = [
                    row as f64 - center[0],
                    (j as f64 - (l as f64 - 1.0) / 2.0) * view.delta_p(),
                    col as f64 - cu,
                ];
                // p = Rᵀ q + center
                let p: Vec<f64> = (0..3).map(|k| (0..3).map(|i| m[i][k] * q[i]).sum::<f64>() + center[k]).collect();
                let d = p[0].round() as usize;
                let (h0, w0) = (p[1].floor(), p[2].floor());
                let (fh, fw) = (p[1] - h0, p[2] - w0);
                for (dh, wh) in [(0i64, 1.0 - fh), (1, fh)] {
                    for (dw, ww) in [(0i64, 1.0 - fw), (1, fw)] {
                        let (h, w) = (h0 as i64 + dh, w0 as i64 + dw);
                        if h < 0 || w < 0 || h >= g.h as i64 || w >= g.w as i64 {
                            continue;
                        }
                        let vox = (d * g.h + h as usize) * g.w + w as usize;
                        a[(row * cols + col) * g.voxels() + vox] += wh * ww * view.delta_p();
                    }
                }
            }
        }
    }
    (rows, cols, a)
}
