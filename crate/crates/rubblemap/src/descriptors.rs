//! Dense local descriptors from a fixed filter bank, plus the binary import
//! and export format for descriptor sets computed elsewhere.
//!
//! Each descriptor summarizes one square patch: statistics of the mean-removed
//! intensity, of oriented derivative responses at four orientations, and of
//! Laplacian responses at two scales. The composition is fixed, so the
//! descriptor dimension is the constant [`DESCRIPTOR_DIM`]. Everything
//! downstream (mixture fitting, Fisher encoding) is dimension-agnostic and
//! works equally on imported descriptors of any width.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::format::{checked_len, Reader, Writer};
use crate::imaging::Image;

/// Components per descriptor produced by the built-in filter bank.
pub const DESCRIPTOR_DIM: usize = 18;

const MAGIC: [u8; 4] = *b"NZRD";
const VERSION: u16 = 1;

/// 3x3 derivative kernels at 0, 90, 45 and 135 degrees, and the two
/// Laplacian kernels. Responses are divided by the kernel's positive weight
/// sum so they stay in [-1,1] for intensities in [0,1].
const KERNEL_GX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const KERNEL_GY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
const KERNEL_G45: [[f64; 3]; 3] = [[0.0, 1.0, 2.0], [-1.0, 0.0, 1.0], [-2.0, -1.0, 0.0]];
const KERNEL_G135: [[f64; 3]; 3] = [[2.0, 1.0, 0.0], [1.0, 0.0, -1.0], [0.0, -1.0, -2.0]];
const KERNEL_LAP3: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
const KERNEL_LAP5: [[f64; 5]; 5] = [
    [0.0, 0.0, 1.0, 0.0, 0.0],
    [0.0, 1.0, 2.0, 1.0, 0.0],
    [1.0, 2.0, -16.0, 2.0, 1.0],
    [0.0, 1.0, 2.0, 1.0, 0.0],
    [0.0, 0.0, 1.0, 0.0, 0.0],
];

/// Sampling parameters for the built-in filter bank.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterBankParams {
    pub patch_size: usize,
    pub stride: usize,
}

impl FilterBankParams {
    pub fn new(patch_size: usize, stride: usize) -> Result<FilterBankParams> {
        if patch_size % 2 == 0 || patch_size == 0 {
            return Err(Error::Config(format!(
                "patch size {patch_size} must be odd and positive"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        Ok(FilterBankParams { patch_size, stride })
    }
}

impl Default for FilterBankParams {
    fn default() -> Self {
        FilterBankParams {
            patch_size: 7,
            stride: 3,
        }
    }
}

/// A set of local descriptors with their center pixel coordinates.
/// Vectors are stored flat, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSet {
    pub dim: usize,
    pub xs: Vec<u32>,
    pub ys: Vec<u32>,
    pub data: Vec<f32>,
}

impl DescriptorSet {
    pub fn empty(dim: usize) -> DescriptorSet {
        DescriptorSet {
            dim,
            xs: Vec::new(),
            ys: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn push(&mut self, x: u32, y: u32, vector: &[f64]) {
        debug_assert_eq!(vector.len(), self.dim);
        self.xs.push(x);
        self.ys.push(y);
        self.data.extend(vector.iter().map(|&v| v as f32));
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Vector `i` widened to f64 for numeric work.
    pub fn vector_f64(&self, i: usize) -> Vec<f64> {
        self.vector(i).iter().map(|&v| v as f64).collect()
    }
}

#[inline]
fn conv_at<const K: usize>(
    patch: &[f64],
    p: usize,
    u: usize,
    v: usize,
    kernel: &[[f64; K]; K],
) -> f64 {
    let half = K / 2;
    let mut acc = 0.0;
    for (dy, row) in kernel.iter().enumerate() {
        let base = (v + dy - half) * p + (u - half);
        for (dx, &k) in row.iter().enumerate() {
            acc += k * patch[base + dx];
        }
    }
    acc
}

/// Mean and mean-absolute filter response over every patch position where a
/// KxK kernel fits. Returns (0,0) when the patch is smaller than the kernel.
fn channel_stats<const K: usize>(patch: &[f64], p: usize, kernel: &[[f64; K]; K]) -> (f64, f64) {
    if p < K {
        return (0.0, 0.0);
    }
    let half = K / 2;
    let scale: f64 = kernel
        .iter()
        .flatten()
        .filter(|&&w| w > 0.0)
        .sum::<f64>()
        .recip();
    let mut sum = 0.0;
    let mut abs_sum = 0.0;
    for v in half..p - half {
        for u in half..p - half {
            let r = conv_at(patch, p, u, v, kernel) * scale;
            sum += r;
            abs_sum += r.abs();
        }
    }
    let count = ((p - 2 * half) * (p - 2 * half)) as f64;
    (sum / count, abs_sum / count)
}

/// Computes the filter-bank descriptor for the patch centered at (cx, cy).
/// `clamp` replicates edge pixels; without it the caller must guarantee the
/// patch lies inside the image.
fn patch_descriptor(gray: &[f64], w: usize, h: usize, cx: usize, cy: usize, p: usize, clamp: bool) -> Vec<f64> {
    let half = p / 2;
    let mut patch = vec![0.0f64; p * p];
    for dy in 0..p {
        for dx in 0..p {
            let (x, y) = if clamp {
                (
                    (cx + dx).saturating_sub(half).min(w - 1),
                    (cy + dy).saturating_sub(half).min(h - 1),
                )
            } else {
                (cx + dx - half, cy + dy - half)
            };
            patch[dy * p + dx] = gray[y * w + x];
        }
    }

    let n = (p * p) as f64;
    let mean = patch.iter().sum::<f64>() / n;
    let mad = patch.iter().map(|v| (v - mean).abs()).sum::<f64>() / n;
    let var = patch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();

    let mut out = Vec::with_capacity(DESCRIPTOR_DIM);
    out.push(mad);
    out.push(std);
    for (m, a) in [
        channel_stats(&patch, p, &KERNEL_GX),
        channel_stats(&patch, p, &KERNEL_GY),
        channel_stats(&patch, p, &KERNEL_G45),
        channel_stats(&patch, p, &KERNEL_G135),
        channel_stats(&patch, p, &KERNEL_LAP3),
        channel_stats(&patch, p, &KERNEL_LAP5),
    ] {
        out.push(m);
        out.push(a);
    }
    // Corner-quadrant mean deviations capture coarse intensity layout.
    let q = half;
    let quad_mean = |x0: usize, y0: usize| -> f64 {
        if q == 0 {
            return 0.0;
        }
        let mut s = 0.0;
        for dy in 0..q {
            for dx in 0..q {
                s += patch[(y0 + dy) * p + (x0 + dx)];
            }
        }
        s / (q * q) as f64 - mean
    };
    out.push(quad_mean(0, 0));
    out.push(quad_mean(p - q.max(1), 0));
    out.push(quad_mean(0, p - q.max(1)));
    out.push(quad_mean(p - q.max(1), p - q.max(1)));
    debug_assert_eq!(out.len(), DESCRIPTOR_DIM);
    out
}

/// Extracts one descriptor per grid position. Patches are fully interior;
/// the grid has floor((W-P)/s)+1 by floor((H-P)/s)+1 positions.
pub fn dense_descriptors(img: &Image, params: &FilterBankParams) -> Result<DescriptorSet> {
    let p = params.patch_size;
    let (w, h) = (img.width as usize, img.height as usize);
    if w < p || h < p {
        return Err(Error::Data(format!(
            "image {w}x{h} smaller than patch size {p}"
        )));
    }
    let gray = img.to_gray();
    let half = p / 2;
    let mut set = DescriptorSet::empty(DESCRIPTOR_DIM);
    let mut y0 = 0;
    while y0 + p <= h {
        let mut x0 = 0;
        while x0 + p <= w {
            let (cx, cy) = (x0 + half, y0 + half);
            let v = patch_descriptor(&gray, w, h, cx, cy, p, false);
            set.push(cx as u32, cy as u32, &v);
            x0 += params.stride;
        }
        y0 += params.stride;
    }
    Ok(set)
}

/// One descriptor per pixel with edge replication, used by the per-pixel
/// class-probability model.
pub fn pixel_descriptors(img: &Image, patch_size: usize) -> Result<DescriptorSet> {
    if patch_size % 2 == 0 || patch_size == 0 {
        return Err(Error::Config(format!(
            "patch size {patch_size} must be odd and positive"
        )));
    }
    let (w, h) = (img.width as usize, img.height as usize);
    let gray = img.to_gray();
    let mut set = DescriptorSet::empty(DESCRIPTOR_DIM);
    for y in 0..h {
        for x in 0..w {
            let v = patch_descriptor(&gray, w, h, x, y, patch_size, true);
            set.push(x as u32, y as u32, &v);
        }
    }
    Ok(set)
}

// ---------------------------------------------------------------------------
// Binary descriptor format

pub fn descriptor_bytes(ds: &DescriptorSet) -> Vec<u8> {
    let mut w = Writer::new();
    w.put_magic(MAGIC);
    w.put_u16(VERSION);
    w.put_u32(ds.len() as u32);
    w.put_u32(ds.dim as u32);
    for i in 0..ds.len() {
        w.put_u32(ds.xs[i]);
        w.put_u32(ds.ys[i]);
    }
    for &v in &ds.data {
        w.put_f32(v);
    }
    w.into_bytes()
}

pub fn descriptors_from_bytes(bytes: &[u8]) -> Result<DescriptorSet> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MAGIC)?;
    r.expect_version(VERSION)?;
    let n = r.read_u32()? as usize;
    let dim = r.read_u32()? as usize;
    let total = checked_len(n, dim)?;
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        xs.push(r.read_u32()?);
        ys.push(r.read_u32()?);
    }
    let data = r.read_f32_vec(total)?;
    r.finish()?;
    Ok(DescriptorSet { dim, xs, ys, data })
}

pub fn write_descriptors(path: &Path, ds: &DescriptorSet) -> Result<()> {
    fs::write(path, descriptor_bytes(ds)).map_err(|e| Error::file(path, e))
}

pub fn read_descriptors(path: &Path) -> Result<DescriptorSet> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    descriptors_from_bytes(&bytes)
}
