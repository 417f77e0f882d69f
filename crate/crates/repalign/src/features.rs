//! Hidden-state feature extraction for the alignment metrics.
//!
//! Inputs are noised at a fixed time with per-example seeded noise, then run
//! through the denoiser with the null class so no label information leaks
//! into the measured representation. Per-example noise streams make the
//! result independent of the forward batch size.

use anyhow::{bail, Context, Result};
use repalign_core::model::teacher::rpaf;
use repalign_core::model::Denoiser;
use repalign_core::numerics::optim::ParamSet;
use repalign_core::numerics::rng::{Rng, Stream};
use repalign_core::numerics::tape::Tape;
use repalign_core::numerics::tensor::Tensor;
use repalign_core::process::{corrupt, corrupt_ddpm, Interpolant};
use std::path::Path;

/// Forward chunk size for eval passes; results do not depend on it.
const EVAL_BATCH: usize = 128;

/// Noise `images` at time `t` using one stream per example, offset by the
/// example's dataset row so dumps taken in slices agree with dumps taken
/// whole.
pub fn noise_at(
    interp: &Interpolant,
    images: &Tensor,
    t: f64,
    seed: u64,
    index_offset: u64,
) -> Result<(Tensor, Vec<f32>)> {
    if !(0.0..=1.0).contains(&t) {
        bail!("eval time {t} outside [0, 1]");
    }
    let m = images.shape()[0];
    let per = images.numel() / m;
    let mut noise = vec![0f32; images.numel()];
    for i in 0..m {
        let mut rng = Rng::for_counter(seed, Stream::EvalNoise, index_offset + i as u64);
        rng.fill_normal(&mut noise[i * per..(i + 1) * per]);
    }
    let eps = Tensor::new(images.shape(), noise).expect("sized by construction");
    let batch = match interp {
        Interpolant::DdpmDiscrete(sched) => {
            let s = ((t * sched.len() as f64).round() as u32).max(1).min(sched.len() as u32);
            let steps = vec![s; m];
            corrupt_ddpm(sched, images, &eps, &steps).map_err(|e| anyhow::anyhow!("{e}"))?
        }
        _ => {
            let times = vec![t as f32; m];
            corrupt(interp, images, &eps, &times).map_err(|e| anyhow::anyhow!("{e}"))?
        }
    };
    Ok((batch.x_t, batch.t))
}

/// Hidden states after each requested layer (1-based) for noised inputs,
/// conditioned on the null class. Returns one [M, N, D] tensor per layer,
/// in the order requested.
pub fn hidden_features(
    denoiser: &Denoiser,
    params: &ParamSet,
    interp: &Interpolant,
    images: &Tensor,
    layers: &[usize],
    t: f64,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let cfg = denoiser.config();
    if layers.is_empty() {
        bail!("no layers requested");
    }
    if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > cfg.depth) {
        bail!("layer {bad} outside 1..={}", cfg.depth);
    }
    let m = images.shape()[0];
    let px = images.numel() / m;
    let null = cfg.null_class();
    let mut per_layer: Vec<Vec<f32>> = vec![Vec::new(); layers.len()];
    let mut dims: Vec<[usize; 2]> = vec![[0, 0]; layers.len()];
    let mut row = 0;
    while row < m {
        let take = EVAL_BATCH.min(m - row);
        let chunk = Tensor::new(
            &[take, images.shape()[1], images.shape()[2], images.shape()[3]],
            images.data()[row * px..(row + take) * px].to_vec(),
        )
        .expect("sized by construction");
        let (x_t, times) = noise_at(interp, &chunk, t, seed, row as u64)?;
        let labels = vec![null; take];
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = denoiser
            .forward(&mut tape, &bound, &x_t, &times, &labels)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        for (slot, &layer) in layers.iter().enumerate() {
            let h = out.hidden_after(layer).map_err(|e| anyhow::anyhow!("{e}"))?;
            let value = tape.value(h);
            let s = value.shape();
            dims[slot] = [s[1], s[2]];
            per_layer[slot].extend_from_slice(value.data());
        }
        row += take;
    }
    layers
        .iter()
        .enumerate()
        .map(|(slot, _)| {
            let [n, d] = dims[slot];
            Tensor::new(&[m, n, d], std::mem::take(&mut per_layer[slot]))
                .map_err(|e| anyhow::anyhow!("{e}"))
        })
        .collect()
}

/// Write [count, N, D] features to disk in the RPAF layout.
pub fn write_rpaf(path: &Path, features: &Tensor) -> Result<()> {
    let bytes = rpaf::encode(features).map_err(|e| anyhow::anyhow!("{e}"))?;
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn read_rpaf(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    rpaf::decode(&bytes).map_err(|e| anyhow::anyhow!("{e}"))
}
