//! End-to-end gradient check of the full denoiser: every parameter tensor
//! is a differentiated leaf and the loss is a plain MSE on the velocity
//! prediction, so one pass covers the stem, both blocks, conditioning,
//! and the output projection jointly.

use repalign_core::model::{Denoiser, DenoiserConfig};
use repalign_core::numerics::optim::{ParamId, ParamSet};
use repalign_core::numerics::{grad_check, GradCheckConfig, Rng, Stream, Tensor};

fn tiny_cfg() -> DenoiserConfig {
    DenoiserConfig {
        img: 8,
        channels: 1,
        patch: 4,
        dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 4,
        time_freq_dim: 8,
    }
}

/// Move every parameter to a generic point. At init the output head and
/// residual gates are zero, which would zero most upstream gradients and
/// make the check vacuous.
fn randomize(params: &mut ParamSet, rng: &mut Rng) {
    for i in 0..params.len() {
        for v in params.get_mut(ParamId(i)).data_mut() {
            *v = 0.15 * rng.normal();
        }
    }
}

#[test]
fn full_denoiser_gradients_match_central_differences() {
    let cfg = GradCheckConfig { h: 1e-3, rel_tol: 1e-3, abs_floor: 1e-4, max_coords: 12 };
    for seed in 0..3u64 {
        let mut params = ParamSet::new();
        let den = Denoiser::init(tiny_cfg(), seed, &mut params).unwrap();
        let mut rng = Rng::for_counter(seed, Stream::Test, 1);
        randomize(&mut params, &mut rng);
        let b = 3;
        let x = Tensor::randn(&[b, 1, 8, 8], &mut rng);
        let target = Tensor::randn(&[b, 1, 8, 8], &mut rng);
        let t = [0.2f32, 0.55, 0.9];
        let labels = [0u32, 3, 4]; // includes the null class
        let inputs: Vec<Tensor> = params.iter().map(|p| p.value.clone()).collect();
        let report = grad_check(
            &inputs,
            |tape, vars| {
                let out = den.forward(tape, vars, &x, &t, &labels)?;
                let want = tape.constant(target.clone());
                tape.mse_loss(out.prediction, want)
            },
            &cfg,
        )
        .unwrap();
        assert!(
            report.ok(),
            "seed {seed}: {} of {} coords failed, worst rel err {:.3e}",
            report.failures.len(),
            report.coords_checked,
            report.max_rel_err
        );
        assert!(report.coords_checked > 100, "check must touch every tensor");
    }
}
