//! Patch <-> token layout, fixed 2D sin-cos position table, and bilinear
//! resampling of patch-grid features.
//!
//! Token order is row-major over the patch grid; within a token the layout
//! is channel-major then row-major over the patch window, i.e.
//! `k = c * p * p + di * p + dj`. `unpatchify` uses the exact inverse
//! permutation, so a round trip is the identity bit-for-bit.

use crate::error::{shape_err, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use alloc::sync::Arc;
use alloc::vec::Vec;

/// Flat gather indices mapping image [b,c,h,w] -> tokens [b,n,p*p*c].
pub fn patch_indices(b: usize, c: usize, h: usize, w: usize, p: usize) -> Result<Arc<Vec<u32>>> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return shape_err("patchify", alloc::format!("patch {p} does not tile {h}x{w}"));
    }
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(b * gh * gw * p * p * c);
    for bi in 0..b {
        for pi in 0..gh {
            for pj in 0..gw {
                for ci in 0..c {
                    for di in 0..p {
                        for dj in 0..p {
                            let (row, col) = (pi * p + di, pj * p + dj);
                            idx.push((((bi * c + ci) * h + row) * w + col) as u32);
                        }
                    }
                }
            }
        }
    }
    Ok(Arc::new(idx))
}

/// Inverse permutation: tokens [b,n,p*p*c] -> image [b,c,h,w].
pub fn unpatch_indices(b: usize, c: usize, h: usize, w: usize, p: usize) -> Result<Arc<Vec<u32>>> {
    let fwd = patch_indices(b, c, h, w, p)?;
    let mut inv = alloc::vec![0u32; fwd.len()];
    for (token_pos, &img_pos) in fwd.iter().enumerate() {
        inv[img_pos as usize] = token_pos as u32;
    }
    Ok(Arc::new(inv))
}

pub fn patchify(tape: &mut Tape, x: Var, p: usize) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 4 {
        return shape_err("patchify", alloc::format!("want [b,c,h,w], got {s:?}"));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let idx = patch_indices(b, c, h, w, p)?;
    tape.reindex(x, idx, &[b, (h / p) * (w / p), p * p * c])
}

pub fn unpatchify(tape: &mut Tape, tokens: Var, c: usize, h: usize, w: usize, p: usize) -> Result<Var> {
    let s = tape.value(tokens).shape().to_vec();
    if s.len() != 3 || s[1] != (h / p) * (w / p) || s[2] != p * p * c {
        return shape_err(
            "unpatchify",
            alloc::format!("tokens {s:?} do not match [{h}x{w}, patch {p}, {c} channels]"),
        );
    }
    let idx = unpatch_indices(s[0], c, h, w, p)?;
    tape.reindex(tokens, idx, &[s[0], c, h, w])
}

/// Fixed 2D sin-cos position table for a square grid: [grid*grid, dim].
/// Half the channels encode the row coordinate, half the column, each as
/// interleaved (sin, cos) pairs over a geometric frequency ladder.
pub fn pos_embed_2d(grid: usize, dim: usize) -> Result<Tensor> {
    if !dim.is_multiple_of(4) {
        return shape_err("pos_embed_2d", alloc::format!("dim {dim} must be divisible by 4"));
    }
    let half = dim / 2;
    let quarter = half / 2;
    let mut data = alloc::vec![0f32; grid * grid * dim];
    for gi in 0..grid {
        for gj in 0..grid {
            let row = &mut data[(gi * grid + gj) * dim..(gi * grid + gj + 1) * dim];
            for f in 0..quarter {
                let omega = 1.0 / libm::pow(10000.0, f as f64 / quarter as f64);
                let (ai, aj) = (gi as f64 * omega, gj as f64 * omega);
                row[2 * f] = libm::sin(ai) as f32;
                row[2 * f + 1] = libm::cos(ai) as f32;
                row[half + 2 * f] = libm::sin(aj) as f32;
                row[half + 2 * f + 1] = libm::cos(aj) as f32;
            }
        }
    }
    Tensor::new(&[grid * grid, dim], data)
}

/// Bilinear resample of patch-grid features [b, src*src, d] to a
/// [b, dst*dst, d] grid, align-corners convention: grid corners map onto
/// grid corners, so equal sizes return the input unchanged.
pub fn interpolate_positions(features: &Tensor, src: usize, dst: usize) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 3 || s[1] != src * src {
        return shape_err(
            "interpolate_positions",
            alloc::format!("features {s:?} do not match source grid {src}"),
        );
    }
    if src == dst {
        return Ok(features.clone());
    }
    let (b, d) = (s[0], s[2]);
    let coord = |i: usize| -> f64 {
        if dst == 1 {
            0.0
        } else {
            i as f64 * (src - 1) as f64 / (dst - 1) as f64
        }
    };
    let mut out = alloc::vec![0f32; b * dst * dst * d];
    let src_data = features.data();
    for bi in 0..b {
        for di in 0..dst {
            let y = coord(di);
            let (y0, fy) = (y as usize, y - (y as usize) as f64);
            let y1 = (y0 + 1).min(src - 1);
            for dj in 0..dst {
                let x = coord(dj);
                let (x0, fx) = (x as usize, x - (x as usize) as f64);
                let x1 = (x0 + 1).min(src - 1);
                let at = |r: usize, c: usize| (bi * src * src + r * src + c) * d;
                let (p00, p01, p10, p11) = (at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1));
                let orow = &mut out[(bi * dst * dst + di * dst + dj) * d..][..d];
                for ch in 0..d {
                    let top = src_data[p00 + ch] as f64 * (1.0 - fx) + src_data[p01 + ch] as f64 * fx;
                    let bot = src_data[p10 + ch] as f64 * (1.0 - fx) + src_data[p11 + ch] as f64 * fx;
                    orow[ch] = (top * (1.0 - fy) + bot * fy) as f32;
                }
            }
        }
    }
    Tensor::new(&[b, dst * dst, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_is_row_major_and_invertible() {
        // 4x4 single-channel image, patch 2: first token is the top-left
        // 2x2 window in row-major order.
        let img: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let t = Tensor::new(&[1, 1, 4, 4], img).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(t.clone());
        let tok = patchify(&mut tape, x, 2).unwrap();
        assert_eq!(tape.value(tok).shape(), &[1, 4, 4]);
        assert_eq!(&tape.value(tok).data()[..4], &[0., 1., 4., 5.]);
        assert_eq!(&tape.value(tok).data()[4..8], &[2., 3., 6., 7.]);
        let back = unpatchify(&mut tape, tok, 1, 4, 4, 2).unwrap();
        assert_eq!(tape.value(back).data(), t.data());
    }

    #[test]
    fn multi_channel_round_trip() {
        let mut rng = crate::numerics::rng::Rng::for_counter(1, crate::numerics::rng::Stream::Test, 0);
        let t = Tensor::randn(&[2, 3, 8, 8], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(t.clone());
        let tok = patchify(&mut tape, x, 4).unwrap();
        assert_eq!(tape.value(tok).shape(), &[2, 4, 48]);
        let back = unpatchify(&mut tape, tok, 3, 8, 8, 4).unwrap();
        assert_eq!(tape.value(back).data(), t.data());
    }

    #[test]
    fn pos_embed_distinct_rows_unit_pairs() {
        let pe = pos_embed_2d(4, 16).unwrap();
        // sin^2 + cos^2 per frequency pair
        for row in pe.data().chunks_exact(16) {
            for pair in row.chunks_exact(2) {
                assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-5);
            }
        }
        let r0 = &pe.data()[..16];
        let r5 = &pe.data()[5 * 16..6 * 16];
        assert!(r0 != r5, "different grid cells need different codes");
    }

    #[test]
    fn interpolate_identity_and_corners() {
        let mut rng = crate::numerics::rng::Rng::for_counter(2, crate::numerics::rng::Stream::Test, 0);
        let f = Tensor::randn(&[1, 9, 2], &mut rng);
        let same = interpolate_positions(&f, 3, 3).unwrap();
        assert_eq!(same.data(), f.data());
        // Upsample 2x2 -> 3x3: corners are preserved exactly.
        let g = Tensor::new(&[1, 4, 1], alloc::vec![1., 2., 3., 4.]).unwrap();
        let up = interpolate_positions(&g, 2, 3).unwrap();
        let d = up.data();
        assert_eq!((d[0], d[2], d[6], d[8]), (1., 2., 3., 4.));
        assert!((d[4] - 2.5).abs() < 1e-6, "center is the mean of corners");
    }

    #[test]
    fn interpolate_average_pool_like_downsample() {
        let g = Tensor::new(&[1, 9, 1], alloc::vec![0., 1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let down = interpolate_positions(&g, 3, 2).unwrap();
        assert_eq!(down.data(), &[0., 2., 6., 8.], "align-corners picks the corner cells");
    }
}
