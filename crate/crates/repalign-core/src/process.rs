//! Forward corruption processes and their exact identities.
//!
//! Continuous kinds follow `x_t = alpha(t) x* + sigma(t) eps` on t in [0, 1]
//! with alpha decreasing from 1 to 0 and sigma increasing from 0 to 1; the
//! regression target is the conditional velocity `alpha' x* + sigma' eps`.
//! The discrete DDPM kind uses `x_s = sqrt(abar_s) x* + sqrt(1－abar_s) eps`
//! over integer steps with an eps-prediction target; its endpoint only
//! approaches pure noise (abar_T stays positive), so endpoint identities are
//! exact for the continuous kinds and approximate for DDPM.

use crate::error::{contract_err, shape_err, Result};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use alloc::vec::Vec;

/// Schedule coefficients at one time, with derivatives (f64: these feed
/// denominators in the score conversion).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coeffs {
    pub alpha: f64,
    pub sigma: f64,
    pub dalpha: f64,
    pub dsigma: f64,
}

/// Linear-beta discrete schedule with cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct DdpmSchedule {
    pub betas: Vec<f64>,
    /// `alpha_bars[i]` is the cumulative product for step `i + 1`.
    pub alpha_bars: Vec<f64>,
}

/// Linearly spaced betas from `beta_start` to `beta_end` inclusive, with
/// `alpha_bars` built by the exact recurrence `abar_i = abar_{i-1}(1-b_i)`.
pub fn ddpm_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DdpmSchedule> {
    if steps == 0 {
        return contract_err("ddpm_schedule", "steps must be positive");
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return contract_err(
            "ddpm_schedule",
            alloc::format!("need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"),
        );
    }
    let mut betas = Vec::with_capacity(steps);
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut abar = 1.0f64;
    for i in 0..steps {
        let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
        let beta = beta_start + (beta_end - beta_start) * frac;
        abar *= 1.0 - beta;
        betas.push(beta);
        alpha_bars.push(abar);
    }
    Ok(DdpmSchedule { betas, alpha_bars })
}

impl DdpmSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// Cumulative product at step `s` (1-based); `s = 0` is the identity.
    pub fn alpha_bar(&self, s: u32) -> Result<f64> {
        match s {
            0 => Ok(1.0),
            _ if (s as usize) <= self.len() => Ok(self.alpha_bars[s as usize - 1]),
            _ => contract_err("ddpm.alpha_bar", alloc::format!("step {s} > {}", self.len())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Interpolant {
    /// alpha = 1 - t, sigma = t.
    Linear,
    /// alpha = cos(pi t / 2), sigma = sin(pi t / 2).
    Vp,
    /// Discrete variance-preserving chain with eps-prediction.
    DdpmDiscrete(DdpmSchedule),
}

impl Interpolant {
    pub fn is_continuous(&self) -> bool {
        !matches!(self, Interpolant::DdpmDiscrete(_))
    }

    /// Coefficients for continuous kinds; the DDPM chain has no continuous
    /// derivative and refuses.
    pub fn coeffs(&self, t: f64) -> Result<Coeffs> {
        if !(0.0..=1.0).contains(&t) {
            return contract_err("coeffs", alloc::format!("t = {t} outside [0, 1]"));
        }
        match self {
            Interpolant::Linear => {
                Ok(Coeffs { alpha: 1.0 - t, sigma: t, dalpha: -1.0, dsigma: 1.0 })
            }
            Interpolant::Vp => {
                let h = core::f64::consts::FRAC_PI_2;
                Ok(Coeffs {
                    alpha: libm::cos(h * t),
                    sigma: libm::sin(h * t),
                    dalpha: -h * libm::sin(h * t),
                    dsigma: h * libm::cos(h * t),
                })
            }
            Interpolant::DdpmDiscrete(_) => {
                contract_err("coeffs", "discrete DDPM schedule has no continuous coefficients")
            }
        }
    }
}

/// A corrupted batch with its regression target: the conditional velocity
/// for continuous kinds, the injected noise for DDPM. `t` is normalized to
/// [0, 1] in all cases (DDPM steps divide by the chain length) and is what
/// the denoiser conditions on.
#[derive(Debug, Clone)]
pub struct NoisedBatch {
    pub x_t: Tensor,
    pub target: Tensor,
    pub t: Vec<f32>,
}

fn per_sample_combine(
    op: &'static str,
    x_star: &Tensor,
    eps: &Tensor,
    ab: &[(f64, f64)],
    tb: &[(f64, f64)],
) -> Result<(Tensor, Tensor)> {
    if x_star.shape() != eps.shape() {
        return shape_err(op, alloc::format!("{:?} vs {:?}", x_star.shape(), eps.shape()));
    }
    let b = *x_star.shape().first().unwrap_or(&0);
    if b == 0 || ab.len() != b {
        return shape_err(op, alloc::format!("batch {b} with {} coefficient rows", ab.len()));
    }
    let stride = x_star.numel() / b;
    let xs = x_star.data();
    let es = eps.data();
    let mut xt = alloc::vec![0f32; xs.len()];
    let mut tg = alloc::vec![0f32; xs.len()];
    for i in 0..b {
        let (a, s) = (ab[i].0 as f32, ab[i].1 as f32);
        let (da, ds) = (tb[i].0 as f32, tb[i].1 as f32);
        for j in i * stride..(i + 1) * stride {
            xt[j] = a * xs[j] + s * es[j];
            tg[j] = da * xs[j] + ds * es[j];
        }
    }
    Ok((Tensor::new(x_star.shape(), xt)?, Tensor::new(x_star.shape(), tg)?))
}

/// Corrupt a clean batch at per-sample times under a continuous interpolant.
pub fn corrupt(interp: &Interpolant, x_star: &Tensor, eps: &Tensor, t: &[f32]) -> Result<NoisedBatch> {
    if !interp.is_continuous() {
        return contract_err("corrupt", "use corrupt_ddpm for the discrete kind");
    }
    let mut ab = Vec::with_capacity(t.len());
    let mut tb = Vec::with_capacity(t.len());
    for &ti in t {
        let c = interp.coeffs(ti as f64)?;
        ab.push((c.alpha, c.sigma));
        tb.push((c.dalpha, c.dsigma));
    }
    let (x_t, target) = per_sample_combine("corrupt", x_star, eps, &ab, &tb)?;
    Ok(NoisedBatch { x_t, target, t: t.to_vec() })
}

/// Corrupt at discrete DDPM steps (1-based; 0 passes the input through).
/// The target is the noise itself.
pub fn corrupt_ddpm(
    sched: &DdpmSchedule,
    x_star: &Tensor,
    eps: &Tensor,
    steps: &[u32],
) -> Result<NoisedBatch> {
    let mut ab = Vec::with_capacity(steps.len());
    for &s in steps {
        let abar = sched.alpha_bar(s)?;
        ab.push((libm::sqrt(abar), libm::sqrt(1.0 - abar)));
    }
    // Target rows are (0, 1): plain eps.
    let tb = alloc::vec![(0.0, 1.0); steps.len()];
    let (x_t, target) = per_sample_combine("corrupt_ddpm", x_star, eps, &ab, &tb)?;
    let t = steps.iter().map(|&s| s as f32 / sched.len() as f32).collect();
    Ok(NoisedBatch { x_t, target, t })
}

/// Per-sample times uniform on the open interval (lo, 1 - lo); endpoints are
/// rejected so the score conversion denominator never vanishes in training.
pub fn draw_times(rng: &mut Rng, n: usize, lo: f32) -> Vec<f32> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let t = lo + rng.next_f32() * (1.0 - 2.0 * lo);
        if t > lo && t < 1.0 - lo {
            out.push(t);
        }
    }
    out
}

/// Convert a velocity field value to the score at time `t`:
/// `s = (alpha v - alpha' x) / (sigma (alpha' sigma - alpha sigma'))`.
/// Exact for the conditional expectations; requires t > 0 where sigma > 0.
pub fn score_from_velocity(interp: &Interpolant, v: &Tensor, x: &Tensor, t: f64) -> Result<Tensor> {
    if v.shape() != x.shape() {
        return shape_err(
            "score_from_velocity",
            alloc::format!("{:?} vs {:?}", v.shape(), x.shape()),
        );
    }
    if t <= 0.0 {
        return contract_err("score_from_velocity", "undefined at t = 0: sigma vanishes");
    }
    let c = interp.coeffs(t)?;
    let denom = c.sigma * (c.dalpha * c.sigma - c.alpha * c.dsigma);
    if denom == 0.0 {
        return contract_err("score_from_velocity", alloc::format!("degenerate denominator at t = {t}"));
    }
    let (ca, cda, inv) = (c.alpha, c.dalpha, 1.0 / denom);
    let out: Vec<f32> = v
        .data()
        .iter()
        .zip(x.data())
        .map(|(&vv, &xv)| ((ca * vv as f64 - cda * xv as f64) * inv) as f32)
        .collect();
    Tensor::new(v.shape(), out)
}

/// Mean squared error between predicted and target velocity, on the tape.
pub fn velocity_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    tape.mse_loss(pred, target)
}
