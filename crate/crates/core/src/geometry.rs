//! Parallel-beam forward and back projection over voxel grids.
//!
//! Volumes are indexed `[d, h, w]` with `w` fastest. `d` is the
//! superior–inferior axis; views rotate about it. At 0° rays travel along
//! `h` (anterior–posterior) and the detector is the `d × w` face. At 90°
//! rays travel along `w` (lateral).
//!
//! A view matrix `M` maps voxel index coordinates to the ray frame
//! `(r, s, u)`: `r` picks the detector row, `u` the detector column
//! (centered) and `s` the position along the ray. Rays are sampled at
//! `s_j = (j − (L − 1)/2)·Δp`, `j = 0..L`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use xct_tensor::{Element, LinearOperator, Tape, Var};

use crate::error::{invalid, shape, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Extent3 {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Extent3 {
    pub fn new(d: usize, h: usize, w: usize) -> Self {
        Self { d, h, w }
    }

    pub fn cube(n: usize) -> Self {
        Self::new(n, n, n)
    }

    pub fn voxels(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }

    /// Detector `(rows, cols)` shared by every view of this grid.
    pub fn detector(&self) -> (usize, usize) {
        (self.d, self.h.max(self.w))
    }
}

/// A 3D scalar voxel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    extent: Extent3,
    data: Vec<f32>,
    value_range: [f32; 2],
}

impl Volume {
    pub fn new(extent: Extent3, data: Vec<f32>) -> Result<Self> {
        Self::with_range(extent, data, [0.0, 1.0])
    }

    pub fn with_range(extent: Extent3, data: Vec<f32>, value_range: [f32; 2]) -> Result<Self> {
        if extent.d == 0 || extent.h == 0 || extent.w == 0 {
            return invalid(format!("volume extents must be ≥ 1, got {extent:?}"));
        }
        if data.len() != extent.voxels() {
            return shape(
                "volume",
                format!("{} voxels for extent {extent:?}", data.len()),
            );
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return invalid(format!("volume voxel {i} is not finite"));
        }
        Ok(Self {
            extent,
            data,
            value_range,
        })
    }

    pub fn zeros(extent: Extent3) -> Self {
        Self {
            extent,
            data: vec![0.0; extent.voxels()],
            value_range: [0.0, 1.0],
        }
    }

    pub fn extent(&self) -> Extent3 {
        self.extent
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn value_range(&self) -> [f32; 2] {
        self.value_range
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.data[(d * self.extent.h + h) * self.extent.w + w]
    }

    pub fn clamped(mut self, lo: f32, hi: f32) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        self
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Sum of two volumes of equal extent.
    pub fn add(&self, other: &Volume) -> Result<Volume> {
        if self.extent != other.extent {
            return shape(
                "volume add",
                format!("{:?} vs {:?}", self.extent, other.extent),
            );
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Volume::with_range(self.extent, data, self.value_range)
    }

    pub fn scaled(mut self, factor: f32) -> Self {
        self.data.iter_mut().for_each(|v| *v *= factor);
        self
    }
}

/// Rigid parallel-beam view about the superior–inferior axis.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewParams {
    angle_deg: f64,
    grid: Extent3,
    delta_p: f64,
    samples_per_ray: usize,
    matrix: [[f64; 4]; 4],
}

/// cos/sin with exact values at multiples of 90°.
fn cos_sin_deg(angle: f64) -> (f64, f64) {
    let quarter = angle / 90.0;
    if (quarter - quarter.round()).abs() < 1e-12 {
        match (quarter.round() as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = angle.to_radians();
        (r.cos(), r.sin())
    }
}

impl ViewParams {
    /// View at `angle_deg` for `grid` with Δp = 1 and one sample per voxel
    /// along the ray axis.
    pub fn new(angle_deg: f64, grid: Extent3) -> Result<Self> {
        Self::with_sampling(angle_deg, grid, 1.0, grid.h.max(grid.w))
    }

    pub fn with_sampling(
        angle_deg: f64,
        grid: Extent3,
        delta_p: f64,
        samples_per_ray: usize,
    ) -> Result<Self> {
        if !angle_deg.is_finite() {
            return invalid("view angle must be finite");
        }
        if !(delta_p > 0.0 && delta_p.is_finite()) {
            return invalid(format!("ray step Δp must be > 0, got {delta_p}"));
        }
        if samples_per_ray == 0 {
            return invalid("samples_per_ray must be ≥ 1");
        }
        if grid.voxels() == 0 {
            return invalid(format!("empty grid {grid:?}"));
        }
        let (c, s) = cos_sin_deg(angle_deg);
        let center = [
            (grid.d as f64 - 1.0) / 2.0,
            (grid.h as f64 - 1.0) / 2.0,
            (grid.w as f64 - 1.0) / 2.0,
        ];
        let rot = [[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]];
        let mut matrix = [[0.0; 4]; 4];
        for i in 0..3 {
            matrix[i][..3].copy_from_slice(&rot[i]);
            matrix[i][3] = -(0..3).map(|j| rot[i][j] * center[j]).sum::<f64>();
        }
        matrix[3][3] = 1.0;
        Ok(Self {
            angle_deg,
            grid,
            delta_p,
            samples_per_ray,
            matrix,
        })
    }

    pub fn angle_deg(&self) -> f64 {
        self.angle_deg
    }

    pub fn grid(&self) -> Extent3 {
        self.grid
    }

    pub fn delta_p(&self) -> f64 {
        self.delta_p
    }

    pub fn samples_per_ray(&self) -> usize {
        self.samples_per_ray
    }

    /// `M`: voxel coordinates `(d, h, w, 1)` → ray frame `(r, s, u, 1)`.
    pub fn matrix(&self) -> [[f64; 4]; 4] {
        self.matrix
    }

    pub fn detector(&self) -> (usize, usize) {
        self.grid.detector()
    }

    /// `|L|·Δp`, the normalizer of the geometric back projection.
    pub fn ray_length(&self) -> f64 {
        self.samples_per_ray as f64 * self.delta_p
    }

    fn cos_sin(&self) -> (f64, f64) {
        (self.matrix[1][1], self.matrix[1][2])
    }

    fn centers(&self) -> (f64, f64, f64) {
        let (_, cols) = self.detector();
        (
            (self.grid.h as f64 - 1.0) / 2.0,
            (self.grid.w as f64 - 1.0) / 2.0,
            (cols as f64 - 1.0) / 2.0,
        )
    }

    fn sample_offset(&self, j: usize) -> f64 {
        (j as f64 - (self.samples_per_ray as f64 - 1.0) / 2.0) * self.delta_p
    }
}

/// A 2D X-ray image with its view.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    view: ViewParams,
}

impl Projection {
    pub fn new(view: ViewParams, data: Vec<f32>) -> Result<Self> {
        let (rows, cols) = view.detector();
        if data.len() != rows * cols {
            return shape(
                "projection",
                format!("{} pixels for a {rows}×{cols} detector", data.len()),
            );
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return invalid(format!("projection pixel {i} is not finite"));
        }
        Ok(Self {
            rows,
            cols,
            data,
            view,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn view(&self) -> &ViewParams {
        &self.view
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Per-image min-max rescale to `[0, 1]`; constant images map to 0.
    pub fn normalized(mut self) -> Self {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        self.data.iter_mut().for_each(|v| {
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        });
        self
    }

    pub(crate) fn map_pixels(mut self, f: impl FnMut(&mut f32)) -> Result<Self> {
        self.data.iter_mut().for_each(f);
        Projection::new(self.view, self.data)
    }
}

/// Bilinear taps of an in-slice point; out-of-grid neighbours are dropped.
#[inline]
fn bilinear_taps(h: f64, w: f64, hn: usize, wn: usize) -> impl Iterator<Item = (usize, f64)> {
    let h0 = h.floor();
    let w0 = w.floor();
    let fh = h - h0;
    let fw = w - w0;
    let (h0, w0) = (h0 as i64, w0 as i64);
    [
        (h0, w0, (1.0 - fh) * (1.0 - fw)),
        (h0, w0 + 1, (1.0 - fh) * fw),
        (h0 + 1, w0, fh * (1.0 - fw)),
        (h0 + 1, w0 + 1, fh * fw),
    ]
    .into_iter()
    .filter(move |&(hi, wi, wt)| {
        wt != 0.0 && hi >= 0 && wi >= 0 && (hi as usize) < hn && (wi as usize) < wn
    })
    .map(move |(hi, wi, wt)| (hi as usize * wn + wi as usize, wt))
}

/// Voxel `(h, w)` position of sample `j` on detector column `col`.
#[inline]
fn sample_point(view: &ViewParams, col: usize, j: usize) -> (f64, f64) {
    let (c, s) = view.cos_sin();
    let (ch, cw, cu) = view.centers();
    let u = col as f64 - cu;
    let t = view.sample_offset(j);
    (ch + c * t - s * u, cw + s * t + c * u)
}

fn check_len(stage: &'static str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return shape(stage, format!("buffer of {got} elements, expected {want}"));
    }
    Ok(())
}

/// Forward projection into `out` (`rows × cols`): Δp-weighted sum of bilinear
/// samples along each ray, zero outside the grid.
pub fn project_into<E: Element>(view: &ViewParams, voxels: &[E], out: &mut [E]) -> Result<()> {
    let g = view.grid();
    let (rows, cols) = view.detector();
    check_len("forward_project", voxels.len(), g.voxels())?;
    check_len("forward_project", out.len(), rows * cols)?;
    let slice = g.h * g.w;
    out.par_chunks_mut(cols).enumerate().for_each(|(r, row)| {
        let plane = &voxels[r * slice..(r + 1) * slice];
        for (col, px) in row.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for j in 0..view.samples_per_ray() {
                let (h, w) = sample_point(view, col, j);
                for (idx, wt) in bilinear_taps(h, w, g.h, g.w) {
                    acc += wt * plane[idx].to_f64().unwrap();
                }
            }
            *px = E::from_f64_lossy(acc * view.delta_p());
        }
    });
    Ok(())
}

/// Exact transpose of [`project_into`] (bilinear splat, Δp-weighted).
pub fn back_project_adjoint_into<E: Element>(
    view: &ViewParams,
    pixels: &[E],
    out: &mut [E],
) -> Result<()> {
    let g = view.grid();
    let (rows, cols) = view.detector();
    check_len("back_project", pixels.len(), rows * cols)?;
    check_len("back_project", out.len(), g.voxels())?;
    let slice = g.h * g.w;
    out.par_chunks_mut(slice).enumerate().for_each(|(r, plane)| {
        let mut acc = vec![0.0f64; slice];
        for col in 0..cols {
            let v = pixels[r * cols + col].to_f64().unwrap() * view.delta_p();
            if v == 0.0 {
                continue;
            }
            for j in 0..view.samples_per_ray() {
                let (h, w) = sample_point(view, col, j);
                for (idx, wt) in bilinear_taps(h, w, g.h, g.w) {
                    acc[idx] += wt * v;
                }
            }
        }
        for (o, a) in plane.iter_mut().zip(acc) {
            *o = E::from_f64_lossy(a);
        }
    });
    Ok(())
}

/// Geometric back projection: each voxel on a sampled ray takes the
/// (linearly interpolated) pixel value of that ray divided by `|L|·Δp`;
/// voxels off every ray are 0.
pub fn back_project_normalized_into<E: Element>(
    view: &ViewParams,
    pixels: &[E],
    out: &mut [E],
) -> Result<()> {
    let g = view.grid();
    let (rows, cols) = view.detector();
    check_len("back_project", pixels.len(), rows * cols)?;
    check_len("back_project", out.len(), g.voxels())?;
    let (c, s) = view.cos_sin();
    let (ch, cw, cu) = view.centers();
    let half = view.ray_length() / 2.0;
    let norm = 1.0 / view.ray_length();
    let slice = g.h * g.w;
    out.par_chunks_mut(slice).enumerate().for_each(|(r, plane)| {
        let row = &pixels[r * cols..(r + 1) * cols];
        for h in 0..g.h {
            for w in 0..g.w {
                let (y, x) = (h as f64 - ch, w as f64 - cw);
                let t = c * y + s * x;
                let u = -s * y + c * x + cu;
                let mut v = 0.0;
                if t.abs() <= half + 1e-9 {
                    let u0 = u.floor();
                    let f = u - u0;
                    let i0 = u0 as i64;
                    for (i, wt) in [(i0, 1.0 - f), (i0 + 1, f)] {
                        if wt != 0.0 && i >= 0 && (i as usize) < cols {
                            v += wt * row[i as usize].to_f64().unwrap();
                        }
                    }
                }
                plane[h * g.w + w] = E::from_f64_lossy(v * norm);
            }
        }
    });
    Ok(())
}

pub fn forward_project(volume: &Volume, view: &ViewParams) -> Result<Projection> {
    if volume.extent() != view.grid() {
        return shape(
            "forward_project",
            format!("volume {:?} vs view grid {:?}", volume.extent(), view.grid()),
        );
    }
    let (rows, cols) = view.detector();
    let mut out = vec![0.0f32; rows * cols];
    project_into(view, volume.data(), &mut out)?;
    Projection::new(view.clone(), out)
}

/// Which back projection to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackProjection {
    /// Pixel value spread over its ray, divided by `|L|·Δp`.
    Normalized,
    /// Transpose of [`forward_project`].
    Adjoint,
}

pub fn back_project(image: &Projection, flavor: BackProjection) -> Result<Volume> {
    let view = image.view();
    let mut out = vec![0.0f32; view.grid().voxels()];
    match flavor {
        BackProjection::Normalized => back_project_normalized_into(view, image.data(), &mut out)?,
        BackProjection::Adjoint => back_project_adjoint_into(view, image.data(), &mut out)?,
    }
    Volume::new(view.grid(), out)
}

/// Sum of the normalized back projections of every image.
pub fn back_project_multi(images: &[Projection]) -> Result<Volume> {
    let Some(first) = images.first() else {
        return invalid("back_project_multi needs at least one image");
    };
    let grid = first.view().grid();
    let mut acc = vec![0.0f32; grid.voxels()];
    let mut one = vec![0.0f32; grid.voxels()];
    for img in images {
        if img.view().grid() != grid {
            return shape(
                "back_project_multi",
                format!("view grids {:?} vs {:?}", img.view().grid(), grid),
            );
        }
        back_project_normalized_into(img.view(), img.data(), &mut one)?;
        acc.iter_mut().zip(&one).for_each(|(a, b)| *a += b);
    }
    Volume::new(grid, acc)
}

/// Angular sampling span of a view set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViewRange {
    /// 0°–90°, endpoints included (limited angle).
    Quarter,
    /// 0°–360°, evenly spaced (sparse view).
    Full,
}

impl ViewRange {
    pub fn from_degrees(deg: u32) -> Result<Self> {
        match deg {
            90 => Ok(ViewRange::Quarter),
            360 => Ok(ViewRange::Full),
            other => invalid(format!("unsupported view range {other}°, expected 90 or 360")),
        }
    }

    pub fn degrees(self) -> u32 {
        match self {
            ViewRange::Quarter => 90,
            ViewRange::Full => 360,
        }
    }
}

/// `count` angles starting at the AP view (0°).
pub fn uniform_view_angles(count: usize, range: ViewRange) -> Result<Vec<f64>> {
    if count == 0 {
        return invalid("view count must be ≥ 1");
    }
    let step = match range {
        ViewRange::Full => 360.0 / count as f64,
        ViewRange::Quarter if count == 1 => 0.0,
        ViewRange::Quarter => 90.0 / (count - 1) as f64,
    };
    Ok((0..count).map(|i| i as f64 * step).collect())
}

pub fn uniform_view_set(count: usize, range: ViewRange, grid: Extent3) -> Result<Vec<ViewParams>> {
    uniform_view_angles(count, range)?
        .into_iter()
        .map(|a| ViewParams::new(a, grid))
        .collect()
}

/// Forward projection as a differentiable tape op on `[D, H, W]` voxels.
#[derive(Clone, Debug)]
pub struct ProjectorOp {
    view: ViewParams,
}

impl ProjectorOp {
    pub fn new(view: ViewParams) -> Self {
        Self { view }
    }
}

impl<E: Element> LinearOperator<E> for ProjectorOp {
    fn input_shape(&self) -> Vec<usize> {
        self.view.grid().as_array().to_vec()
    }

    fn output_shape(&self) -> Vec<usize> {
        let (r, c) = self.view.detector();
        vec![r, c]
    }

    fn apply(&self, x: &[E], out: &mut [E]) {
        project_into(&self.view, x, out).expect("shapes checked by the tape");
    }

    fn apply_adjoint(&self, y: &[E], out: &mut [E]) {
        back_project_adjoint_into(&self.view, y, out).expect("shapes checked by the tape");
    }
}

pub fn forward_project_var<E: Element>(tape: &mut Tape<E>, voxels: Var, view: &ViewParams) -> Result<Var> {
    Ok(tape.linear_op(voxels, Arc::new(ProjectorOp::new(view.clone())))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_block_is_orthonormal() {
        for angle in [0.0, 17.0, 45.0, 90.0, 133.3, 270.0] {
            let v = ViewParams::new(angle, Extent3::cube(8)).unwrap();
            let m = v.matrix();
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn ap_view_rays_run_along_h() {
        let g = Extent3::cube(4);
        let v = ViewParams::new(0.0, g).unwrap();
        // Voxel (d, h, w) = (1, 0, 3): ray frame u should pick column 3.
        let m = v.matrix();
        let p = [1.0, 0.0, 3.0, 1.0];
        let frame: Vec<f64> = (0..3).map(|i| (0..4).map(|j| m[i][j] * p[j]).sum()).collect();
        assert_eq!(frame[0], -0.5);
        assert_eq!(frame[1], -1.5);
        assert_eq!(frame[2], 1.5);
    }

    #[test]
    fn invalid_view_params() {
        let g = Extent3::cube(4);
        assert!(ViewParams::with_sampling(0.0, g, 0.0, 4).is_err());
        assert!(ViewParams::with_sampling(0.0, g, 1.0, 0).is_err());
        assert!(ViewParams::new(f64::NAN, g).is_err());
    }

    #[test]
    fn single_voxel_single_sample() {
        let g = Extent3::cube(1);
        let vol = Volume::new(g, vec![0.625]).unwrap();
        let view = ViewParams::with_sampling(0.0, g, 1.0, 1).unwrap();
        let p = forward_project(&vol, &view).unwrap();
        assert_eq!(p.data(), &[0.625]);
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let g = Extent3::cube(2);
        assert!(Volume::new(g, vec![0.0, 1.0, f32::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
        let view = ViewParams::new(0.0, g).unwrap();
        assert!(Projection::new(view, vec![f32::INFINITY, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn empty_back_projection_list() {
        assert!(back_project_multi(&[]).is_err());
    }

    #[test]
    fn view_angles() {
        assert_eq!(uniform_view_angles(1, ViewRange::Quarter).unwrap(), vec![0.0]);
        assert_eq!(uniform_view_angles(1, ViewRange::Full).unwrap(), vec![0.0]);
        assert_eq!(uniform_view_angles(2, ViewRange::Quarter).unwrap(), vec![0.0, 90.0]);
        assert_eq!(uniform_view_angles(3, ViewRange::Quarter).unwrap(), vec![0.0, 45.0, 90.0]);
        assert_eq!(uniform_view_angles(4, ViewRange::Full).unwrap(), vec![0.0, 90.0, 180.0, 270.0]);
        assert!(uniform_view_angles(0, ViewRange::Full).is_err());
        assert!(ViewRange::from_degrees(180).is_err());
    }
}
