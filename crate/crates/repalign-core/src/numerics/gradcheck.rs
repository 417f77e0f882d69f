//! Central-difference gradient verification. The independent oracle for
//! every hand-written backward pass: perturb one coordinate, re-run the
//! forward closure on a fresh tape, and compare slopes.

use crate::error::{contract_err, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference half-step.
    pub h: f32,
    pub rel_tol: f32,
    /// Disagreements below this magnitude never fail. Sized to the noise of
    /// central differences on f32 forwards: loss roundoff ~ |loss| * 6e-8
    /// divided by 2h = 1e-3 leaves slope noise near 3e-5 per unit of loss.
    pub abs_floor: f32,
    /// Cap on coordinates checked per input tensor; 0 checks all. Sampling
    /// is a deterministic stride so reruns check identical coordinates.
    pub max_coords: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { h: 1e-3, rel_tol: 1e-3, abs_floor: 1e-4, max_coords: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// Worst |analytic - numeric| over all checked coordinates; compare
    /// against `abs_floor` to see how much headroom the check had.
    pub max_abs_err: f64,
    /// (input index, coordinate, analytic, numeric) for the worst mismatch.
    pub failures: Vec<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn agree(analytic: f64, numeric: f64, cfg: &GradCheckConfig) -> bool {
    (analytic - numeric).abs()
        <= cfg.abs_floor as f64 + cfg.rel_tol as f64 * analytic.abs().max(numeric.abs())
}

fn chosen_coords(numel: usize, max_coords: usize) -> Vec<usize> {
    if max_coords == 0 || numel <= max_coords {
        (0..numel).collect()
    } else {
        let stride = numel as f64 / max_coords as f64;
        (0..max_coords).map(|i| ((i as f64 * stride) as usize).min(numel - 1)).collect()
    }
}

/// Check the tape's gradients for `f` against central differences.
///
/// `f` must be a pure deterministic function from leaves to a scalar loss.
/// Only inputs flagged `requires_grad` are differentiated.
pub fn grad_check<F>(inputs: &[Tensor], f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(inputs, &f)?;
    check_against(inputs, f, &analytic, cfg)
}

/// Gradients of `f` for each input, by tape backward. `None` for inputs that
/// do not require grad.
pub fn analytic_grads<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Option<Tensor>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    Ok(vars.into_iter().map(|v| grads.take(v)).collect())
}

/// Compare `provided` gradients (tape output, or a deliberately broken
/// implementation under test) against central differences of `f`.
pub fn check_against<F>(
    inputs: &[Tensor],
    f: F,
    provided: &[Option<Tensor>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !inputs.iter().any(|t| t.requires_grad()) {
        return contract_err("grad_check", "no input requires grad");
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        if tape.value(loss).numel() != 1 {
            return contract_err("grad_check", "loss must be scalar");
        }
        Ok(tape.value(loss).data()[0] as f64)
    };
    let mut report = GradCheckReport {
        coords_checked: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        failures: Vec::new(),
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let ga = provided[i]
            .as_ref()
            .ok_or(crate::error::Error::Contract {
                op: "grad_check",
                detail: alloc::format!("input {i} requires grad but got none"),
            })?
            .clone();
        for j in chosen_coords(input.numel(), cfg.max_coords) {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + cfg.h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - cfg.h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * cfg.h as f64);
            let analytic = ga.data()[j] as f64;
            report.coords_checked += 1;
            let rel = (analytic - numeric).abs()
                / analytic.abs().max(numeric.abs()).max(cfg.abs_floor as f64);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
            }
            report.max_abs_err = report.max_abs_err.max((analytic - numeric).abs());
            if !agree(analytic, numeric, cfg) {
                report.failures.push((i, j, analytic, numeric));
            }
        }
    }
    Ok(report)
}
