//! 3D convolution kernels (im2col + GEMM).
//!
//! A [`ConvGeom`] always describes the pair (big side, small side) of a
//! strided convolution: `conv3d` maps big → small and `transposed_conv3d`
//! maps small → big with the same kernel layout `[C_small, C_big, k, k, k]`,
//! so the two are exact adjoints of each other.

use crate::element::{gemm, Element};
use crate::error::{arg_err, shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub big_channels: usize,
    pub small_channels: usize,
    pub big: [usize; 3],
    pub small: [usize; 3],
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

const AXES: [&str; 3] = ["depth", "height", "width"];

impl ConvGeom {
    /// Geometry of a forward convolution from `input` spatial extents.
    pub fn for_conv(
        input: [usize; 3],
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return arg_err("conv3d", format!("kernel size {k} must be odd"));
        }
        Self::check_stride("conv3d", stride)?;
        let mut small = [0; 3];
        for (axis, (&n, s)) in input.iter().zip(small.iter_mut()).enumerate() {
            if n + 2 * pad < k {
                return shape_err(
                    "conv3d",
                    format!(
                        "{} axis: extent {n} with padding {pad} is smaller than kernel {k}",
                        AXES[axis]
                    ),
                );
            }
            *s = (n + 2 * pad - k) / stride + 1;
        }
        Ok(Self {
            big_channels: in_channels,
            small_channels: out_channels,
            big: input,
            small,
            k,
            stride,
            pad,
        })
    }

    /// Geometry of a transposed convolution from `input` (small side) extents.
    pub fn for_transposed(
        input: [usize; 3],
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if k == 0 {
            return arg_err("transposed_conv3d", "kernel size must be positive");
        }
        Self::check_stride("transposed_conv3d", stride)?;
        let mut big = [0; 3];
        for (axis, (&n, b)) in input.iter().zip(big.iter_mut()).enumerate() {
            let full = (n.max(1) - 1) * stride + k;
            if n == 0 || full <= 2 * pad {
                return shape_err(
                    "transposed_conv3d",
                    format!(
                        "{} axis: extent {n} yields empty output with padding {pad}",
                        AXES[axis]
                    ),
                );
            }
            *b = full - 2 * pad;
        }
        Ok(Self {
            big_channels: out_channels,
            small_channels: in_channels,
            big,
            small: input,
            k,
            stride,
            pad,
        })
    }

    fn check_stride(op: &'static str, stride: usize) -> Result<()> {
        if stride == 1 || stride == 2 {
            Ok(())
        } else {
            arg_err(op, format!("stride {stride} not in {{1, 2}}"))
        }
    }

    pub fn big_voxels(&self) -> usize {
        self.big.iter().product()
    }

    pub fn small_voxels(&self) -> usize {
        self.small.iter().product()
    }

    /// Rows of the unfolded matrix: `C_big · k³`.
    pub fn patch_len(&self) -> usize {
        self.big_channels * self.k * self.k * self.k
    }

    pub fn kernel_len(&self) -> usize {
        self.small_channels * self.patch_len()
    }

    /// Unfold one big-side sample into a `patch_len × small_voxels` matrix.
    fn im2col<E: Element>(&self, big: &[E], col: &mut [E]) {
        let [bd, bh, bw] = self.big;
        let [sd, sh, sw] = self.small;
        let k = self.k;
        let p = sd * sh * sw;
        let mut row = 0;
        for c in 0..self.big_channels {
            let plane = &big[c * bd * bh * bw..(c + 1) * bd * bh * bw];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let dst = &mut col[row * p..(row + 1) * p];
                        let mut o = 0;
                        for od in 0..sd {
                            let id = (od * self.stride + kd) as isize - self.pad as isize;
                            for oh in 0..sh {
                                let ih = (oh * self.stride + kh) as isize - self.pad as isize;
                                let inside = id >= 0
                                    && (id as usize) < bd
                                    && ih >= 0
                                    && (ih as usize) < bh;
                                if !inside {
                                    dst[o..o + sw].iter_mut().for_each(|v| *v = E::zero());
                                    o += sw;
                                    continue;
                                }
                                let base = (id as usize * bh + ih as usize) * bw;
                                for ow in 0..sw {
                                    let iw = (ow * self.stride + kw) as isize - self.pad as isize;
                                    dst[o] = if iw >= 0 && (iw as usize) < bw {
                                        plane[base + iw as usize]
                                    } else {
                                        E::zero()
                                    };
                                    o += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Fold a `patch_len × small_voxels` matrix back, accumulating into `big`.
    fn col2im<E: Element>(&self, col: &[E], big: &mut [E]) {
        let [bd, bh, bw] = self.big;
        let [sd, sh, sw] = self.small;
        let k = self.k;
        let p = sd * sh * sw;
        let mut row = 0;
        for c in 0..self.big_channels {
            let plane = &mut big[c * bd * bh * bw..(c + 1) * bd * bh * bw];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let src = &col[row * p..(row + 1) * p];
                        let mut o = 0;
                        for od in 0..sd {
                            let id = (od * self.stride + kd) as isize - self.pad as isize;
                            for oh in 0..sh {
                                let ih = (oh * self.stride + kh) as isize - self.pad as isize;
                                if id < 0 || id as usize >= bd || ih < 0 || ih as usize >= bh {
                                    o += sw;
                                    continue;
                                }
                                let base = (id as usize * bh + ih as usize) * bw;
                                for ow in 0..sw {
                                    let iw = (ow * self.stride + kw) as isize - self.pad as isize;
                                    if iw >= 0 && (iw as usize) < bw {
                                        plane[base + iw as usize] =
                                            plane[base + iw as usize] + src[o];
                                    }
                                    o += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// big (N×Cb×big) → small (N×Cs×small).
    pub(crate) fn conv_forward<E: Element>(
        &self,
        batch: usize,
        x: &[E],
        w: &[E],
        bias: Option<&[E]>,
    ) -> Vec<E> {
        let pl = self.patch_len();
        let p = self.small_voxels();
        let xs = self.big_channels * self.big_voxels();
        let ys = self.small_channels * p;
        let mut col = vec![E::zero(); pl * p];
        let mut out = vec![E::zero(); batch * ys];
        for n in 0..batch {
            self.im2col(&x[n * xs..(n + 1) * xs], &mut col);
            let dst = &mut out[n * ys..(n + 1) * ys];
            gemm(self.small_channels, pl, p, w, false, &col, false, dst, false);
            if let Some(b) = bias {
                add_channel_bias(dst, b, p);
            }
        }
        out
    }

    /// Gradients of [`conv_forward`] given the output gradient.
    pub(crate) fn conv_backward<E: Element>(
        &self,
        batch: usize,
        x: &[E],
        w: &[E],
        dy: &[E],
        need_dx: bool,
        need_dw: bool,
    ) -> (Option<Vec<E>>, Option<Vec<E>>) {
        let pl = self.patch_len();
        let p = self.small_voxels();
        let xs = self.big_channels * self.big_voxels();
        let ys = self.small_channels * p;
        let mut col = vec![E::zero(); pl * p];
        let mut dx = need_dx.then(|| vec![E::zero(); batch * xs]);
        let mut dw = need_dw.then(|| vec![E::zero(); self.kernel_len()]);
        for n in 0..batch {
            let g = &dy[n * ys..(n + 1) * ys];
            if let Some(dw) = dw.as_mut() {
                self.im2col(&x[n * xs..(n + 1) * xs], &mut col);
                gemm(self.small_channels, p, pl, g, false, &col, true, dw, true);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(pl, self.small_channels, p, w, true, g, false, &mut col, false);
                self.col2im(&col, &mut dx[n * xs..(n + 1) * xs]);
            }
        }
        (dx, dw)
    }

    /// small (N×Cs×small) → big (N×Cb×big).
    pub(crate) fn transposed_forward<E: Element>(
        &self,
        batch: usize,
        y: &[E],
        w: &[E],
        bias: Option<&[E]>,
    ) -> Vec<E> {
        let pl = self.patch_len();
        let p = self.small_voxels();
        let bv = self.big_voxels();
        let xs = self.big_channels * bv;
        let ys = self.small_channels * p;
        let mut col = vec![E::zero(); pl * p];
        let mut out = vec![E::zero(); batch * xs];
        for n in 0..batch {
            gemm(pl, self.small_channels, p, w, true, &y[n * ys..(n + 1) * ys], false, &mut col, false);
            let dst = &mut out[n * xs..(n + 1) * xs];
            self.col2im(&col, dst);
            if let Some(b) = bias {
                add_channel_bias(dst, b, bv);
            }
        }
        out
    }

    pub(crate) fn transposed_backward<E: Element>(
        &self,
        batch: usize,
        y: &[E],
        dx: &[E],
        w: &[E],
        need_dy: bool,
        need_dw: bool,
    ) -> (Option<Vec<E>>, Option<Vec<E>>) {
        let pl = self.patch_len();
        let p = self.small_voxels();
        let xs = self.big_channels * self.big_voxels();
        let ys = self.small_channels * p;
        let mut col = vec![E::zero(); pl * p];
        let mut dy = need_dy.then(|| vec![E::zero(); batch * ys]);
        let mut dw = need_dw.then(|| vec![E::zero(); self.kernel_len()]);
        for n in 0..batch {
            self.im2col(&dx[n * xs..(n + 1) * xs], &mut col);
            if let Some(dy) = dy.as_mut() {
                gemm(self.small_channels, pl, p, w, false, &col, false, &mut dy[n * ys..(n + 1) * ys], false);
            }
            if let Some(dw) = dw.as_mut() {
                gemm(self.small_channels, p, pl, &y[n * ys..(n + 1) * ys], false, &col, true, dw, true);
            }
        }
        (dy, dw)
    }
}

fn add_channel_bias<E: Element>(dst: &mut [E], bias: &[E], voxels: usize) {
    for (chunk, &b) in dst.chunks_mut(voxels).zip(bias) {
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

/// Per-channel sum of a `[N, C, voxels]` gradient (bias gradient).
pub(crate) fn channel_sums<E: Element>(g: &[E], batch: usize, channels: usize) -> Vec<E> {
    let voxels = g.len() / (batch * channels).max(1);
    let mut out = vec![E::zero(); channels];
    for (i, chunk) in g.chunks(voxels).enumerate() {
        let c = i % channels;
        out[c] = out[c] + chunk.iter().copied().sum::<E>();
    }
    out
}
