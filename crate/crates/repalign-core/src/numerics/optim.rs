//! Named parameters, AdamW with decoupled weight decay, EMA shadows, and
//! global-norm clipping. Parameter identity is the slash path name: inits
//! are keyed by name, checkpoints store name -> tensor, and optimizer and
//! EMA state stay aligned with `ParamSet` insertion order.

use crate::error::{contract_err, shape_err, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Param { name, value: value.with_grad() });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.entries.iter_mut().find(|p| p.name == name) {
            Some(p) => {
                if p.value.shape() != value.shape() {
                    return shape_err(
                        "param_set.set",
                        alloc::format!("{name}: {:?} vs {:?}", p.value.shape(), value.shape()),
                    );
                }
                p.value = value.with_grad();
                Ok(())
            }
            None => contract_err("param_set.set", alloc::format!("unknown parameter {name}")),
        }
    }

    pub fn total_elems(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    /// Insert every parameter as a grad-requiring leaf, in insertion order.
    /// The returned vars are index-aligned with `ParamId`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First/second moment buffers plus the shared step counter, aligned with
/// `ParamSet` order.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        OptimState { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One AdamW step with bias correction and decoupled decay:
/// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
/// `grads[i]` of `None` means zero gradient for parameter `i`.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &[Option<Tensor>],
    state: &mut OptimState,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return shape_err(
            "adamw_step",
            alloc::format!("{} grads for {} params", grads.len(), params.len()),
        );
    }
    state.step += 1;
    let bc1 = 1.0 - libm::pow(cfg.beta1 as f64, state.step as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2 as f64, state.step as f64);
    for (i, param) in params.entries.iter_mut().enumerate() {
        let p = param.value.data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let zero_grad;
        let g: &[f32] = match &grads[i] {
            Some(t) => {
                if t.numel() != p.len() {
                    return shape_err("adamw_step", alloc::format!("grad size mismatch at {}", param.name));
                }
                t.data()
            }
            None => {
                zero_grad = alloc::vec![0f32; p.len()];
                &zero_grad
            }
        };
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] as f64 / bc1;
            let v_hat = v[j] as f64 / bc2;
            let update = m_hat / (libm::sqrt(v_hat) + cfg.eps as f64)
                + cfg.weight_decay as f64 * p[j] as f64;
            p[j] -= (cfg.lr as f64 * update) as f32;
        }
        if !p.iter().all(|x| x.is_finite()) {
            return Err(crate::error::Error::NonFinite { op: "adamw_step" });
        }
    }
    Ok(())
}

/// Exponential moving average of parameters, updated after every optimizer
/// step: `shadow = decay * shadow + (1 - decay) * live`.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub decay: f32,
    pub shadow: Vec<Tensor>,
}

impl EmaState {
    /// Shadows start as a copy of the live parameters.
    pub fn new(params: &ParamSet, decay: f32) -> Self {
        EmaState { decay, shadow: params.iter().map(|p| p.value.clone()).collect() }
    }

    pub fn update(&mut self, params: &ParamSet) -> Result<()> {
        if self.shadow.len() != params.len() {
            return shape_err("ema_update", "shadow count mismatch");
        }
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params.iter()) {
            for (sv, pv) in s.data_mut().iter_mut().zip(p.value.data()) {
                *sv = d * *sv + (1.0 - d) * pv;
            }
        }
        Ok(())
    }

    /// A copy of the parameter set with EMA values substituted in.
    pub fn materialize(&self, params: &ParamSet) -> ParamSet {
        let mut out = params.clone();
        for (entry, s) in out.entries.iter_mut().zip(&self.shadow) {
            entry.value = s.clone().with_grad();
        }
        out
    }
}

/// Global L2 norm over all gradients (f64 accumulation).
pub fn global_grad_norm(grads: &[Option<Tensor>]) -> f64 {
    let mut acc = 0f64;
    for g in grads.iter().flatten() {
        for &v in g.data() {
            acc += v as f64 * v as f64;
        }
    }
    libm::sqrt(acc)
}

/// Scale gradients so the global norm does not exceed `max_norm`.
/// Returns the pre-clip norm. `max_norm <= 0` disables clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f32) -> f64 {
    let norm = global_grad_norm(grads);
    if max_norm > 0.0 && norm > max_norm as f64 {
        let scale = (max_norm as f64 / norm) as f32;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f32) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::new(&[1], alloc::vec![v]).unwrap());
        p
    }

    #[test]
    fn first_adamw_step_moves_by_about_lr() {
        let mut params = one_param(1.0);
        let mut st = OptimState::new(&params);
        let cfg = AdamWConfig { lr: 0.1, ..Default::default() };
        let g = alloc::vec![Some(Tensor::new(&[1], alloc::vec![1.0]).unwrap())];
        adamw_step(&mut params, &g, &mut st, &cfg).unwrap();
        // bias-corrected m_hat = 1, v_hat = 1 -> update ~ lr regardless of g scale
        let p = params.get(ParamId(0)).data()[0];
        assert!((p - 0.9).abs() < 1e-6, "{p}");

        let mut params2 = one_param(1.0);
        let mut st2 = OptimState::new(&params2);
        let g2 = alloc::vec![Some(Tensor::new(&[1], alloc::vec![100.0]).unwrap())];
        adamw_step(&mut params2, &g2, &mut st2, &cfg).unwrap();
        let p2 = params2.get(ParamId(0)).data()[0];
        assert!((p2 - 0.9).abs() < 1e-5, "step magnitude should be gradient-scale invariant: {p2}");
    }

    #[test]
    fn decoupled_decay_with_zero_grad() {
        let mut params = one_param(1.0);
        let mut st = OptimState::new(&params);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        adamw_step(&mut params, &[None], &mut st, &cfg).unwrap();
        let p = params.get(ParamId(0)).data()[0];
        assert!((p - 0.95).abs() < 1e-6, "{p}");
    }

    #[test]
    fn ema_converges_toward_live() {
        let mut params = one_param(0.0);
        let mut ema = EmaState::new(&params, 0.9);
        params.get_mut(ParamId(0)).data_mut()[0] = 1.0;
        ema.update(&params).unwrap();
        assert!((ema.shadow[0].data()[0] - 0.1).abs() < 1e-6);
        ema.update(&params).unwrap();
        assert!((ema.shadow[0].data()[0] - 0.19).abs() < 1e-6);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut grads = alloc::vec![
            Some(Tensor::new(&[1], alloc::vec![3.0]).unwrap()),
            Some(Tensor::new(&[1], alloc::vec![4.0]).unwrap()),
        ];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-9);
        assert!((grads[0].as_ref().unwrap().data()[0] - 0.6).abs() < 1e-6);
        assert!((grads[1].as_ref().unwrap().data()[0] - 0.8).abs() < 1e-6);
        // disabled clipping leaves values alone
        let mut g2 = alloc::vec![Some(Tensor::new(&[1], alloc::vec![3.0]).unwrap())];
        clip_global_norm(&mut g2, 0.0);
        assert_eq!(g2[0].as_ref().unwrap().data()[0], 3.0);
    }

    #[test]
    fn adamw_is_bit_deterministic() {
        let run = || {
            let mut params = ParamSet::new();
            let mut rng =
                crate::numerics::rng::Rng::for_counter(3, crate::numerics::rng::Stream::Test, 1);
            params.push("w", Tensor::randn(&[16], &mut rng));
            let mut st = OptimState::new(&params);
            let cfg = AdamWConfig::default();
            for step in 0..5 {
                let mut g =
                    crate::numerics::rng::Rng::for_counter(4, crate::numerics::rng::Stream::Test, step);
                let grads = alloc::vec![Some(Tensor::randn(&[16], &mut g))];
                adamw_step(&mut params, &grads, &mut st, &cfg).unwrap();
            }
            params.get(ParamId(0)).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
