//! Binary volume/projection files and PGM previews.
//!
//! `XCTV`: magic, version `u32`, extents `D, H, W` (`u32`), value range
//! (two `f32`), then `f32` voxels with `W` fastest.
//! `XCTP`: magic, extents `rows, cols` (`u32`), angle `f32`, then `f32`
//! pixels. Everything little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Result, XctError};
use crate::geometry::{Extent3, Projection, ViewParams, Volume};

pub const VOLUME_MAGIC: &[u8; 4] = b"XCTV";
pub const PROJECTION_MAGIC: &[u8; 4] = b"XCTP";
pub const VOLUME_VERSION: u32 = 1;

fn format_err(path: &Path, detail: impl Into<String>) -> XctError {
    XctError::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let e = v.extent();
    let mut out = Vec::with_capacity(32 + 4 * e.voxels());
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    for x in [e.d, e.h, e.w] {
        out.extend_from_slice(&(x as u32).to_le_bytes());
    }
    for r in v.value_range() {
        out.extend_from_slice(&r.to_le_bytes());
    }
    for &x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(format_err(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(format_err(
                self.path,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn decode_volume(path: &Path, bytes: &[u8]) -> Result<Volume> {
    let mut r = Reader { path, bytes, pos: 0 };
    if r.take(4)? != VOLUME_MAGIC {
        return Err(format_err(path, "bad magic, expected XCTV"));
    }
    let version = r.u32()?;
    if version != VOLUME_VERSION {
        return Err(format_err(path, format!("unsupported volume version {version}")));
    }
    let extent = Extent3::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let range = [r.f32()?, r.f32()?];
    let data = r.f32s(extent.voxels())?;
    r.finish()?;
    Volume::with_range(extent, data, range).map_err(|e| format_err(path, e.to_string()))
}

pub fn encode_projection(p: &Projection) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * p.data().len());
    out.extend_from_slice(PROJECTION_MAGIC);
    out.extend_from_slice(&(p.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(p.cols() as u32).to_le_bytes());
    out.extend_from_slice(&(p.view().angle_deg() as f32).to_le_bytes());
    for &x in p.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// The view is rebuilt for a `rows × cols × cols` grid with default sampling.
pub fn decode_projection(path: &Path, bytes: &[u8]) -> Result<Projection> {
    let mut r = Reader { path, bytes, pos: 0 };
    if r.take(4)? != PROJECTION_MAGIC {
        return Err(format_err(path, "bad magic, expected XCTP"));
    }
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let angle = r.f32()? as f64;
    let data = r.f32s(rows * cols)?;
    r.finish()?;
    let view = ViewParams::new(angle, Extent3::new(rows, cols, cols))
        .map_err(|e| format_err(path, e.to_string()))?;
    Projection::new(view, data).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    write_atomic(path, &encode_volume(v))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| format_err(path, e.to_string()))?;
    decode_volume(path, &bytes)
}

pub fn write_projection(path: &Path, p: &Projection) -> Result<()> {
    write_atomic(path, &encode_projection(p))
}

pub fn read_projection(path: &Path) -> Result<Projection> {
    let bytes = fs::read(path).map_err(|e| format_err(path, e.to_string()))?;
    decode_projection(path, &bytes)
}

/// Binary 16-bit PGM, min-max windowed.
pub fn encode_pgm16(width: usize, height: usize, pixels: &[f32]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pgm pixel count");
    let (lo, hi) = pixels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &v in pixels {
        let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
        let q = (t * 65535.0).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

/// Middle axial (`d` fixed) slice, `h × w`.
pub fn axial_slice(v: &Volume) -> (usize, usize, Vec<f32>) {
    let e = v.extent();
    let d = e.d / 2;
    let data = v.data()[d * e.h * e.w..(d + 1) * e.h * e.w].to_vec();
    (e.w, e.h, data)
}

/// Middle coronal (`h` fixed) slice, `d × w`.
pub fn coronal_slice(v: &Volume) -> (usize, usize, Vec<f32>) {
    let e = v.extent();
    let h = e.h / 2;
    let mut data = Vec::with_capacity(e.d * e.w);
    for d in 0..e.d {
        data.extend((0..e.w).map(|w| v.get(d, h, w)));
    }
    (e.w, e.d, data)
}

pub fn write_slices(dir: &Path, stem: &str, v: &Volume) -> Result<()> {
    let (w, h, px) = axial_slice(v);
    write_atomic(&dir.join(format!("{stem}_axial.pgm")), &encode_pgm16(w, h, &px))?;
    let (w, h, px) = coronal_slice(v);
    write_atomic(&dir.join(format!("{stem}_coronal.pgm")), &encode_pgm16(w, h, &px))?;
    Ok(())
}
