//! Binary pixmap output for sample grids: P5 for one channel, P6 for three.
//! Pixel values in [-1, 1] map linearly to [0, 255]; out-of-range values
//! saturate, since sampled images are not clamped anywhere else.

use anyhow::{bail, Context, Result};
use repalign_core::numerics::tensor::Tensor;
use std::path::Path;

fn to_byte(v: f32) -> u8 {
    (((v + 1.0) * 0.5 * 255.0).round()).clamp(0.0, 255.0) as u8
}

/// Tile [B, C, H, W] images left-to-right, top-to-bottom into one pixmap.
/// Unfilled cells in the last row stay black.
pub fn write_pixmap_grid(path: &Path, images: &Tensor, cols: usize) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 {
        bail!("expected [B, C, H, W] images, got {:?}", s);
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if b == 0 || cols == 0 {
        bail!("empty grid");
    }
    if c != 1 && c != 3 {
        bail!("pixmaps hold 1 or 3 channels, got {c}");
    }
    let cols = cols.min(b);
    let rows = b.div_ceil(cols);
    let (cw, ch) = (cols * w, rows * h);
    let mut pixels = vec![0u8; cw * ch * c];
    let data = images.data();
    for i in 0..b {
        let (gy, gx) = (i / cols, i % cols);
        for ch_i in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let src = ((i * c + ch_i) * h + y) * w + x;
                    // Interleaved channels in the file, planar in the tensor.
                    let dst = ((gy * h + y) * cw + gx * w + x) * c + ch_i;
                    pixels[dst] = to_byte(data[src]);
                }
            }
        }
    }
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{cw} {ch}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Parse a binary pixmap back into (channels, width, height, bytes).
pub fn read_pixmap(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let header_fields = 4; // magic, width, height, maxval
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < header_fields && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos])?.to_string());
    }
    if fields.len() < header_fields {
        bail!("truncated pixmap header");
    }
    pos += 1; // single whitespace byte after maxval
    let c = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => bail!("unsupported pixmap magic {m:?}"),
    };
    let (w, h): (usize, usize) = (fields[1].parse()?, fields[2].parse()?);
    if fields[3] != "255" {
        bail!("expected maxval 255, got {}", fields[3]);
    }
    let want = w * h * c;
    let data = bytes[pos..].to_vec();
    if data.len() != want {
        bail!("pixmap data is {} bytes, expected {want}", data.len());
    }
    Ok((c, w, h, data))
}
