//! Synthetic shape images and IDX file ingestion.
//!
//! Shapes are rasterized with 4x4 supersampling so per-pixel coverage is
//! smooth in the latent factors. Pixels live in [-1, 1]: background -1,
//! shape interior -1 + 2 * intensity. Class counts are exactly balanced and
//! every image's latent factors are recorded row-aligned for oracle use.

use anyhow::{bail, Context, Result};
use repalign_core::numerics::rng::{Rng, Stream};
use repalign_core::numerics::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub const CLASS_NAMES: [&str; 4] = ["disc", "square", "cross", "stripes"];
pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeFactors {
    pub class: u32,
    /// Center in units of the image size.
    pub cx: f32,
    pub cy: f32,
    /// Shape side length in units of the image size.
    pub scale: f32,
    pub intensity: f32,
}

#[derive(Debug, Clone)]
pub struct ShapesDataset {
    pub size: usize,
    /// [count, 1, size, size] in [-1, 1].
    pub images: Tensor,
    pub labels: Vec<u32>,
    pub factors: Vec<ShapeFactors>,
}

impl ShapesDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.images.data()[i * n..(i + 1) * n]
    }
}

fn coverage(f: &ShapeFactors, size: usize, x: f32, y: f32) -> bool {
    let (cx, cy) = (f.cx * size as f32, f.cy * size as f32);
    let h = 0.5 * f.scale * size as f32;
    let (dx, dy) = (x - cx, y - cy);
    match f.class {
        0 => dx * dx + dy * dy <= h * h,
        1 => dx.abs() <= h && dy.abs() <= h,
        2 => {
            let w = h / 3.0;
            (dx.abs() <= w && dy.abs() <= h) || (dy.abs() <= w && dx.abs() <= h)
        }
        _ => {
            // Horizontal stripes: period from scale, phase from the center.
            let period = (f.scale * size as f32 * 0.5).max(2.0);
            let phase = (y - cy) / period;
            (phase - phase.floor()) < 0.5
        }
    }
}

fn rasterize(f: &ShapeFactors, size: usize, out: &mut [f32]) {
    const SS: usize = 4;
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0usize;
            for sy in 0..SS {
                for sx in 0..SS {
                    let x = px as f32 + (sx as f32 + 0.5) / SS as f32;
                    let y = py as f32 + (sy as f32 + 0.5) / SS as f32;
                    if coverage(f, size, x, y) {
                        hits += 1;
                    }
                }
            }
            let cov = hits as f32 / (SS * SS) as f32;
            out[py * size + px] = -1.0 + 2.0 * f.intensity * cov;
        }
    }
}

/// Generate `count` images with exactly balanced classes. Factors are drawn
/// from one stream per sample index, so each image depends only on
/// (seed, index).
pub fn generate_shapes(size: usize, count: usize, seed: u64) -> Result<ShapesDataset> {
    if size != 16 && size != 32 {
        bail!("image size must be 16 or 32, got {size}");
    }
    if count == 0 {
        bail!("need at least one sample");
    }
    // Balanced labels, deterministically shuffled.
    let mut labels: Vec<u32> = (0..count).map(|i| (i % NUM_CLASSES) as u32).collect();
    let mut shuffle = Rng::for_counter(seed, Stream::DataGen, 0);
    for i in (1..count).rev() {
        labels.swap(i, shuffle.below(i as u64 + 1) as usize);
    }
    let mut images = vec![0f32; count * size * size];
    let mut factors = Vec::with_capacity(count);
    for (i, &class) in labels.iter().enumerate() {
        let mut rng = Rng::for_counter(seed, Stream::DataGen, 1 + i as u64);
        let f = ShapeFactors {
            class,
            cx: 0.4 + 0.2 * rng.next_f32(),
            cy: 0.4 + 0.2 * rng.next_f32(),
            scale: 0.3 + 0.3 * rng.next_f32(),
            intensity: 0.7 + 0.3 * rng.next_f32(),
        };
        rasterize(&f, size, &mut images[i * size * size..(i + 1) * size * size]);
        factors.push(f);
    }
    Ok(ShapesDataset {
        size,
        images: Tensor::new(&[count, 1, size, size], images).map_err(|e| anyhow::anyhow!("{e}"))?,
        labels,
        factors,
    })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be32(v: u32) -> [u8; 4] {
    v.to_be_bytes()
}

/// Write images as IDX3 u8 (pixels mapped from [-1,1] to 0..=255).
pub fn write_idx_images(path: &Path, images: &Tensor) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        bail!("expected [n,1,h,w] images, got {s:?}");
    }
    let mut out = Vec::with_capacity(16 + images.numel());
    out.extend_from_slice(&be32(IDX_IMAGES_MAGIC));
    out.extend_from_slice(&be32(s[0] as u32));
    out.extend_from_slice(&be32(s[2] as u32));
    out.extend_from_slice(&be32(s[3] as u32));
    out.extend(
        images
            .data()
            .iter()
            .map(|&v| (((v + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0)) as u8),
    );
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .with_context(|| format!("writing {}", path.display()))
}

pub fn write_idx_labels(path: &Path, labels: &[u32]) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l > 255) {
        bail!("label {bad} does not fit in a byte");
    }
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&be32(IDX_LABELS_MAGIC));
    out.extend_from_slice(&be32(labels.len() as u32));
    out.extend(labels.iter().map(|&l| l as u8));
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .with_context(|| format!("writing {}", path.display()))
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        bail!("{what}: file ends at byte {} but field needs bytes {offset}..{end}", bytes.len());
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Load an IDX3 image file and IDX1 label file into [-1,1] pixels.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<(Tensor, Vec<u32>)> {
    let mut img_bytes = Vec::new();
    std::fs::File::open(images_path)
        .and_then(|mut f| f.read_to_end(&mut img_bytes))
        .with_context(|| format!("reading {}", images_path.display()))?;
    let magic = read_u32_be(&img_bytes, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        bail!("image magic {magic:#010x} at byte 0, want {IDX_IMAGES_MAGIC:#010x}");
    }
    let n = read_u32_be(&img_bytes, 4, "image count")? as usize;
    let h = read_u32_be(&img_bytes, 8, "image rows")? as usize;
    let w = read_u32_be(&img_bytes, 12, "image cols")? as usize;
    let want = 16 + n * h * w;
    if img_bytes.len() != want {
        bail!("image payload: expected {want} bytes, file has {}", img_bytes.len());
    }
    let pixels: Vec<f32> =
        img_bytes[16..].iter().map(|&b| b as f32 / 255.0 * 2.0 - 1.0).collect();

    let mut lbl_bytes = Vec::new();
    std::fs::File::open(labels_path)
        .and_then(|mut f| f.read_to_end(&mut lbl_bytes))
        .with_context(|| format!("reading {}", labels_path.display()))?;
    let magic = read_u32_be(&lbl_bytes, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        bail!("label magic {magic:#010x} at byte 0, want {IDX_LABELS_MAGIC:#010x}");
    }
    let ln = read_u32_be(&lbl_bytes, 4, "label count")? as usize;
    if lbl_bytes.len() != 8 + ln {
        bail!("label payload: expected {} bytes, file has {}", 8 + ln, lbl_bytes.len());
    }
    if ln != n {
        bail!("count mismatch: {n} images vs {ln} labels");
    }
    let labels: Vec<u32> = lbl_bytes[8..].iter().map(|&b| b as u32).collect();
    let images =
        Tensor::new(&[n, 1, h, w], pixels).map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok((images, labels))
}
