//! Gradient-free feature teachers on the patch grid, plus the RPAF byte
//! format for teacher features produced outside the trainer.
//!
//! All teachers emit [batch, grid*grid, width] tensors over the same
//! row-major patch order as the denoiser tokens. When the teacher grid
//! differs from the model grid, callers resample with
//! `patches::interpolate_positions`.

use crate::error::{contract_err, shape_err, Result};
use crate::numerics::tensor::Tensor;
use alloc::vec::Vec;

/// Teacher output: per-patch feature rows and the grid they live on.
#[derive(Debug, Clone)]
pub struct TeacherFeatures {
    pub features: Tensor,
    pub grid: usize,
}

/// Ground-truth teacher for synthetic data: per-patch occupancy (fraction of
/// pixels above `threshold`) plus the class one-hot repeated on every patch.
/// Width is `1 + num_classes`.
#[derive(Debug, Clone)]
pub struct OracleTeacher {
    pub patch: usize,
    pub num_classes: usize,
    pub threshold: f32,
}

impl OracleTeacher {
    pub fn new(patch: usize, num_classes: usize) -> Self {
        OracleTeacher { patch, num_classes, threshold: 0.0 }
    }

    pub fn width(&self) -> usize {
        1 + self.num_classes
    }

    pub fn encode(&self, images: &Tensor, labels: &[u32]) -> Result<TeacherFeatures> {
        let (b, grid, patch_px) = image_grid("oracle_teacher", images, self.patch)?;
        if labels.len() != b {
            return shape_err("oracle_teacher", "labels must match the batch");
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return contract_err("oracle_teacher", alloc::format!("label {bad} out of range"));
        }
        let d = self.width();
        let n = grid * grid;
        let mut out = alloc::vec![0f32; b * n * d];
        for bi in 0..b {
            for pi in 0..n {
                let mut lit = 0usize;
                for &v in patch_pixels(images, bi, pi, grid, self.patch) {
                    if v > self.threshold {
                        lit += 1;
                    }
                }
                let row = &mut out[(bi * n + pi) * d..(bi * n + pi + 1) * d];
                row[0] = lit as f32 / patch_px as f32;
                row[1 + labels[bi] as usize] = 1.0;
            }
        }
        Ok(TeacherFeatures { features: Tensor::new(&[b, n, d], out)?, grid })
    }
}

/// Hand-crafted local statistics teacher: per patch
/// [mean, std, horizontal gradient energy, vertical gradient energy],
/// each channel standardized by statistics frozen when the teacher is fit
/// on the training set.
#[derive(Debug, Clone)]
pub struct DescriptorTeacher {
    pub patch: usize,
    pub mean: [f32; 4],
    pub std: [f32; 4],
}

pub const DESCRIPTOR_WIDTH: usize = 4;

fn raw_descriptor(patch_vals: &[f32], p: usize) -> [f32; 4] {
    let n = patch_vals.len() as f64;
    let mean = patch_vals.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = patch_vals.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / n;
    let mut hsum = 0f64;
    let mut vsum = 0f64;
    for i in 0..p {
        for j in 0..p {
            if j + 1 < p {
                hsum += (patch_vals[i * p + j + 1] - patch_vals[i * p + j]).abs() as f64;
            }
            if i + 1 < p {
                vsum += (patch_vals[(i + 1) * p + j] - patch_vals[i * p + j]).abs() as f64;
            }
        }
    }
    let pairs = (p * (p - 1)) as f64;
    [mean as f32, libm::sqrt(var) as f32, (hsum / pairs) as f32, (vsum / pairs) as f32]
}

impl DescriptorTeacher {
    /// Fit channel statistics on a training set; they are frozen from then
    /// on so train and eval see the same map.
    pub fn fit(images: &Tensor, patch: usize) -> Result<Self> {
        if patch < 2 {
            return contract_err("descriptor_teacher", "patch must be >= 2 for gradient energies");
        }
        let (b, grid, _) = image_grid("descriptor_teacher", images, patch)?;
        let n = grid * grid;
        let mut sums = [0f64; 4];
        let mut sqs = [0f64; 4];
        let count = (b * n) as f64;
        for bi in 0..b {
            for pi in 0..n {
                let d = raw_descriptor(patch_pixels_vec(images, bi, pi, grid, patch).as_slice(), patch);
                for ch in 0..4 {
                    sums[ch] += d[ch] as f64;
                    sqs[ch] += d[ch] as f64 * d[ch] as f64;
                }
            }
        }
        let mut mean = [0f32; 4];
        let mut std = [0f32; 4];
        for ch in 0..4 {
            let m = sums[ch] / count;
            let v = (sqs[ch] / count - m * m).max(0.0);
            mean[ch] = m as f32;
            // Constant channels map to zero rather than exploding.
            std[ch] = libm::sqrt(v).max(1e-6) as f32;
        }
        Ok(DescriptorTeacher { patch, mean, std })
    }

    pub fn encode(&self, images: &Tensor) -> Result<TeacherFeatures> {
        let (b, grid, _) = image_grid("descriptor_teacher", images, self.patch)?;
        let n = grid * grid;
        let mut out = alloc::vec![0f32; b * n * DESCRIPTOR_WIDTH];
        for bi in 0..b {
            for pi in 0..n {
                let d = raw_descriptor(
                    patch_pixels_vec(images, bi, pi, grid, self.patch).as_slice(),
                    self.patch,
                );
                let row = &mut out[(bi * n + pi) * DESCRIPTOR_WIDTH..][..DESCRIPTOR_WIDTH];
                for ch in 0..4 {
                    row[ch] = (d[ch] - self.mean[ch]) / self.std[ch];
                }
            }
        }
        Ok(TeacherFeatures { features: Tensor::new(&[b, n, DESCRIPTOR_WIDTH], out)?, grid })
    }
}

/// Teacher features precomputed elsewhere and addressed by example index.
#[derive(Debug, Clone)]
pub struct FileTeacher {
    /// [count, grid*grid, width]
    pub features: Tensor,
    pub grid: usize,
}

impl FileTeacher {
    pub fn new(features: Tensor) -> Result<Self> {
        let s = features.shape();
        if s.len() != 3 {
            return shape_err("file_teacher", alloc::format!("want [count, n, d], got {s:?}"));
        }
        let grid = isqrt(s[1]);
        if grid * grid != s[1] {
            return contract_err("file_teacher", alloc::format!("{} patches is not a square grid", s[1]));
        }
        Ok(FileTeacher { grid, features })
    }

    pub fn count(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.features.shape()[2]
    }

    /// Rows for the given example indices: [len, grid*grid, width].
    pub fn encode(&self, indices: &[usize]) -> Result<TeacherFeatures> {
        let (count, n, d) = (self.count(), self.features.shape()[1], self.width());
        if let Some(&bad) = indices.iter().find(|&&i| i >= count) {
            return contract_err("file_teacher", alloc::format!("index {bad} out of range {count}"));
        }
        let src = self.features.data();
        let mut out = alloc::vec![0f32; indices.len() * n * d];
        for (r, &i) in indices.iter().enumerate() {
            out[r * n * d..(r + 1) * n * d].copy_from_slice(&src[i * n * d..(i + 1) * n * d]);
        }
        Ok(TeacherFeatures {
            features: Tensor::new(&[indices.len(), n, d], out)?,
            grid: self.grid,
        })
    }
}

fn isqrt(n: usize) -> usize {
    let mut r = libm::sqrt(n as f64) as usize;
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    while r * r > n {
        r -= 1;
    }
    r
}

fn image_grid(op: &'static str, images: &Tensor, patch: usize) -> Result<(usize, usize, usize)> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return shape_err(op, alloc::format!("want single-channel [b,1,h,w], got {s:?}"));
    }
    if patch == 0 || !s[2].is_multiple_of(patch) || s[2] != s[3] {
        return contract_err(op, alloc::format!("patch {patch} does not tile {}x{}", s[2], s[3]));
    }
    Ok((s[0], s[2] / patch, patch * patch))
}

fn patch_pixels_vec(images: &Tensor, bi: usize, pi: usize, grid: usize, p: usize) -> Vec<f32> {
    patch_pixels(images, bi, pi, grid, p).copied().collect()
}

fn patch_pixels(
    images: &Tensor,
    bi: usize,
    pi: usize,
    grid: usize,
    p: usize,
) -> impl Iterator<Item = &f32> {
    let w = grid * p;
    let (gi, gj) = (pi / grid, pi % grid);
    let data = images.data();
    (0..p).flat_map(move |di| {
        let row = gi * p + di;
        let start = bi * w * w + row * w + gj * p;
        data[start..start + p].iter()
    })
}

/// Byte codec for teacher feature files: magic "RPAF", little-endian u32
/// header (version, count, patches-per-example, width), then packed
/// little-endian f32 rows.
pub mod rpaf {
    use super::*;

    pub const MAGIC: &[u8; 4] = b"RPAF";
    pub const VERSION: u32 = 1;

    pub fn encode(features: &Tensor) -> Result<Vec<u8>> {
        let s = features.shape();
        if s.len() != 3 {
            return shape_err("rpaf.encode", alloc::format!("want [count, n, d], got {s:?}"));
        }
        let mut out = Vec::with_capacity(20 + features.numel() * 4);
        out.extend_from_slice(MAGIC);
        for v in [VERSION, s[0] as u32, s[1] as u32, s[2] as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &f in features.data() {
            out.extend_from_slice(&f.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Tensor> {
        let fail = |detail: &str, at: usize| {
            contract_err("rpaf.decode", alloc::format!("{detail} at byte {at}"))
        };
        if bytes.len() < 20 {
            return fail("truncated header", bytes.len());
        }
        if &bytes[..4] != MAGIC {
            return fail("bad magic", 0);
        }
        let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        if u32_at(4) != VERSION {
            return fail("unsupported version", 4);
        }
        let (count, n, d) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        let want = 20 + count * n * d * 4;
        if bytes.len() != want {
            return fail("payload size mismatch", bytes.len().min(want));
        }
        let mut data = Vec::with_capacity(count * n * d);
        for ch in bytes[20..].chunks_exact(4) {
            data.push(f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]));
        }
        Tensor::new(&[count, n, d], data)
    }
}
