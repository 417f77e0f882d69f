//! Reverse-time integrators over a learned or analytic prediction field.
//!
//! Continuous kinds integrate from t = 1 down to a floor `t_end` on a
//! uniform grid (Euler for the probability-flow ODE, Euler-Maruyama for the
//! reverse SDE with diffusion scale w_t), then take one final drift-only
//! Euler hop from `t_end` to 0. The floor keeps the score conversion away
//! from the sigma -> 0 singularity; the closing hop is deterministic so the
//! output lands on the clean manifold. The discrete kind runs DDPM
//! ancestral steps over the full chain.
//!
//! Classifier-free guidance combines conditional and unconditional
//! predictions inside a closed time interval. With scale 1 or outside the
//! interval the conditional prediction is returned as-is (the combine is
//! never formed), so unguided and trivially-guided runs are bit-identical
//! and cost one field evaluation per step.

use crate::error::{contract_err, shape_err, Result};
use crate::numerics::rng::{Rng, Stream};
use crate::numerics::tensor::Tensor;
use crate::process::{score_from_velocity, Interpolant};
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    OdeEuler,
    SdeEulerMaruyama,
    DdpmAncestral,
}

/// Diffusion scale w_t for the reverse SDE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WtRule {
    /// w_t = sigma_t.
    Sigma,
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Euler intervals on [1, t_end] (the closing hop is extra); for the
    /// ancestral sampler this must equal the chain length.
    pub steps: usize,
    pub t_end: f64,
    pub wt: WtRule,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { kind: SamplerKind::SdeEulerMaruyama, steps: 250, t_end: 0.04, wt: WtRule::Sigma }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return contract_err("sampler_config", "steps must be positive");
        }
        if !matches!(self.kind, SamplerKind::DdpmAncestral) && !(0.0 < self.t_end && self.t_end < 1.0)
        {
            return contract_err("sampler_config", "t_end must lie in (0, 1)");
        }
        if let WtRule::Const(c) = self.wt {
            if c <= 0.0 {
                return contract_err("sampler_config", "constant diffusion scale must be positive");
            }
        }
        Ok(())
    }

    fn wt(&self, sigma: f64) -> f64 {
        match self.wt {
            WtRule::Sigma => sigma,
            WtRule::Const(c) => c,
        }
    }
}

/// Guidance weight and the closed time interval where it applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub lo: f64,
    pub hi: f64,
}

impl GuidanceConfig {
    pub fn none() -> Self {
        GuidanceConfig { scale: 1.0, lo: 0.0, hi: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale < 1.0 {
            return contract_err("guidance_config", "scale must be >= 1");
        }
        Ok(())
    }

    /// Active strictly above scale 1 and inside [lo, hi]. An inverted
    /// interval (lo > hi) is empty and never activates.
    pub fn active(&self, t: f64) -> bool {
        self.scale > 1.0 && t >= self.lo && t <= self.hi
    }
}

/// One denoiser evaluation: velocity for continuous training, predicted
/// noise for the discrete chain. `labels: None` means the null class
/// everywhere (the unconditional branch).
pub trait DenoisePredictor {
    fn predict(&mut self, x: &Tensor, t: f64, labels: Option<&[u32]>) -> Result<Tensor>;
}

/// Conditional prediction with classifier-free guidance applied inside the
/// configured interval: `v_u + scale (v_c - v_u)`.
pub fn guided_prediction<F: DenoisePredictor>(
    field: &mut F,
    x: &Tensor,
    t: f64,
    labels: &[u32],
    g: &GuidanceConfig,
) -> Result<Tensor> {
    let cond = field.predict(x, t, Some(labels))?;
    if !g.active(t) {
        return Ok(cond);
    }
    let uncond = field.predict(x, t, None)?;
    let w = g.scale as f32;
    let data: Vec<f32> = uncond
        .data()
        .iter()
        .zip(cond.data())
        .map(|(&u, &c)| u + w * (c - u))
        .collect();
    Tensor::new(cond.shape(), data)
}

/// Forward Euler: `x + v dt` (dt is negative in reverse time).
pub fn ode_step(x: &Tensor, v: &Tensor, dt: f64) -> Result<Tensor> {
    if x.shape() != v.shape() {
        return shape_err("ode_step", "state and velocity shapes differ");
    }
    let data: Vec<f32> =
        x.data().iter().zip(v.data()).map(|(&xv, &vv)| xv + (dt as f32) * vv).collect();
    Tensor::new(x.shape(), data)
}

/// Euler-Maruyama step of the reverse SDE:
/// `x + (v - w_t/2 * score) dt + sqrt(w_t |dt|) z`.
pub fn sde_step(x: &Tensor, v: &Tensor, score: &Tensor, wt: f64, dt: f64, z: &Tensor) -> Result<Tensor> {
    if x.shape() != v.shape() || x.shape() != score.shape() || x.shape() != z.shape() {
        return shape_err("sde_step", "state, drift, score, noise shapes differ");
    }
    let diff = libm::sqrt(wt * dt.abs()) as f32;
    let half_w = (0.5 * wt) as f32;
    let dtf = dt as f32;
    let data: Vec<f32> = x
        .data()
        .iter()
        .zip(v.data())
        .zip(score.data())
        .zip(z.data())
        .map(|(((&xv, &vv), &sv), &zv)| xv + (vv - half_w * sv) * dtf + diff * zv)
        .collect();
    Tensor::new(x.shape(), data)
}

/// DDPM ancestral update from step s to s-1 with fixed variance beta_s.
pub fn ancestral_step(
    x: &Tensor,
    eps_hat: &Tensor,
    beta: f64,
    alpha_bar: f64,
    z: &Tensor,
) -> Result<Tensor> {
    if x.shape() != eps_hat.shape() || x.shape() != z.shape() {
        return shape_err("ancestral_step", "shape mismatch");
    }
    let coef = (beta / libm::sqrt(1.0 - alpha_bar)) as f32;
    let inv_sqrt_a = (1.0 / libm::sqrt(1.0 - beta)) as f32;
    let sd = libm::sqrt(beta) as f32;
    let data: Vec<f32> = x
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(z.data())
        .map(|((&xv, &ev), &zv)| inv_sqrt_a * (xv - coef * ev) + sd * zv)
        .collect();
    Tensor::new(x.shape(), data)
}

/// Generate `labels.len()` samples of the given per-sample shape.
///
/// Noise is drawn from one stream per global sample index
/// `(seed, SampleNoise, index_offset + i)`, so results do not depend on how
/// a request is split into batches. With `trajectory` supplied, the state
/// after every grid point is recorded (including the initial noise and, for
/// continuous kinds, the state at `t_end` before the closing hop).
#[allow(clippy::too_many_arguments)]
pub fn sample<F: DenoisePredictor>(
    field: &mut F,
    interp: &Interpolant,
    scfg: &SamplerConfig,
    gcfg: &GuidanceConfig,
    labels: &[u32],
    shape: [usize; 3],
    seed: u64,
    index_offset: u64,
    mut trajectory: Option<&mut Vec<Tensor>>,
) -> Result<Tensor> {
    scfg.validate()?;
    gcfg.validate()?;
    if labels.is_empty() {
        return contract_err("sample", "need at least one label");
    }
    let b = labels.len();
    let numel = shape[0] * shape[1] * shape[2];
    let full = [b, shape[0], shape[1], shape[2]];

    let mut rngs: Vec<Rng> =
        (0..b).map(|i| Rng::for_counter(seed, Stream::SampleNoise, index_offset + i as u64)).collect();
    let draw = |rngs: &mut Vec<Rng>| -> Tensor {
        let mut data = alloc::vec![0f32; b * numel];
        for (i, rng) in rngs.iter_mut().enumerate() {
            rng.fill_normal(&mut data[i * numel..(i + 1) * numel]);
        }
        Tensor::new(&full, data).expect("sized by construction")
    };
    let mut x = draw(&mut rngs);
    if let Some(tr) = trajectory.as_deref_mut() {
        tr.push(x.clone());
    }

    match scfg.kind {
        SamplerKind::DdpmAncestral => {
            let Interpolant::DdpmDiscrete(sched) = interp else {
                return contract_err("sample", "ancestral sampling needs the discrete interpolant");
            };
            if scfg.steps != sched.len() {
                return contract_err(
                    "sample",
                    alloc::format!("steps {} != chain length {}", scfg.steps, sched.len()),
                );
            }
            let t_of = |s: u32| s as f64 / sched.len() as f64;
            for s in (1..=sched.len() as u32).rev() {
                let eps_hat = guided_prediction(field, &x, t_of(s), labels, gcfg)?;
                let z = if s > 1 { draw(&mut rngs) } else { Tensor::zeros(&full) };
                x = ancestral_step(
                    &x,
                    &eps_hat,
                    sched.betas[s as usize - 1],
                    sched.alpha_bars[s as usize - 1],
                    &z,
                )?;
                if let Some(tr) = trajectory.as_deref_mut() {
                    tr.push(x.clone());
                }
            }
        }
        SamplerKind::OdeEuler | SamplerKind::SdeEulerMaruyama => {
            if !interp.is_continuous() {
                return contract_err("sample", "Euler samplers need a continuous interpolant");
            }
            let n = scfg.steps;
            let dt = -(1.0 - scfg.t_end) / n as f64;
            for k in 0..n {
                let t = 1.0 + dt * k as f64;
                let v = guided_prediction(field, &x, t, labels, gcfg)?;
                x = match scfg.kind {
                    SamplerKind::OdeEuler => ode_step(&x, &v, dt)?,
                    SamplerKind::SdeEulerMaruyama => {
                        let sigma = interp.coeffs(t)?.sigma;
                        let score = score_from_velocity(interp, &v, &x, t)?;
                        let z = draw(&mut rngs);
                        sde_step(&x, &v, &score, scfg.wt(sigma), dt, &z)?
                    }
                    SamplerKind::DdpmAncestral => unreachable!(),
                };
                if let Some(tr) = trajectory.as_deref_mut() {
                    tr.push(x.clone());
                }
            }
            // Closing hop t_end -> 0, drift only: the field is evaluated at
            // t_end where it is still well defined.
            let v = guided_prediction(field, &x, scfg.t_end, labels, gcfg)?;
            x = ode_step(&x, &v, -scfg.t_end)?;
            if let Some(tr) = trajectory {
                tr.push(x.clone());
            }
        }
    }
    Ok(x)
}

/// Analytic field for a Gaussian data distribution `N(mean, c^2 I)`:
/// posterior expectations are closed-form, so samplers can be validated
/// against exact moments. Ignores labels.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    pub mean: Vec<f32>,
    pub c: f64,
    pub interp: Interpolant,
}

impl GaussianOracle {
    /// Marginal law of x_t: returns (alpha_t, std_t) where
    /// `x_t ~ N(alpha_t mean, std_t^2 I)`.
    pub fn marginal(&self, t: f64) -> Result<(f64, f64)> {
        let c = self.interp.coeffs(t)?;
        Ok((c.alpha, libm::sqrt(c.alpha * c.alpha * self.c * self.c + c.sigma * c.sigma)))
    }

    fn posterior_velocity(&self, x: &Tensor, alpha: f64, sigma: f64, da: f64, ds: f64) -> Result<Tensor> {
        let d = self.mean.len();
        if !x.numel().is_multiple_of(d) {
            return shape_err("gaussian_oracle", "state does not tile the mean vector");
        }
        let denom = alpha * alpha * self.c * self.c + sigma * sigma;
        let k = alpha * self.c * self.c / denom;
        let out: Vec<f32> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &xv)| {
                let mu = self.mean[i % d] as f64;
                let ex = mu + k * (xv as f64 - alpha * mu);
                let eeps = if sigma > 0.0 { (xv as f64 - alpha * ex) / sigma } else { 0.0 };
                (da * ex + ds * eeps) as f32
            })
            .collect();
        Tensor::new(x.shape(), out)
    }
}

/// Exact velocity `E[dx_t/dt | x_t]` for a Gaussian oracle under a
/// continuous interpolant.
pub fn gaussian_oracle_velocity(oracle: &GaussianOracle, x: &Tensor, t: f64) -> Result<Tensor> {
    let c = oracle.interp.coeffs(t)?;
    oracle.posterior_velocity(x, c.alpha, c.sigma, c.dalpha, c.dsigma)
}

impl DenoisePredictor for GaussianOracle {
    fn predict(&mut self, x: &Tensor, t: f64, _labels: Option<&[u32]>) -> Result<Tensor> {
        match &self.interp {
            Interpolant::DdpmDiscrete(sched) => {
                // eps-prediction at the nearest chain step.
                let s = libm::round(t * sched.len() as f64) as u32;
                let abar = sched.alpha_bar(s.max(1))?;
                let (alpha, sigma) = (libm::sqrt(abar), libm::sqrt(1.0 - abar));
                let d = self.mean.len();
                let denom = alpha * alpha * self.c * self.c + sigma * sigma;
                let k = alpha * self.c * self.c / denom;
                let out: Vec<f32> = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &xv)| {
                        let mu = self.mean[i % d] as f64;
                        let ex = mu + k * (xv as f64 - alpha * mu);
                        (((xv as f64) - alpha * ex) / sigma) as f32
                    })
                    .collect();
                Tensor::new(x.shape(), out)
            }
            _ => gaussian_oracle_velocity(self, x, t),
        }
    }
}
