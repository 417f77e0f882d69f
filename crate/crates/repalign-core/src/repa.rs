//! Representation alignment objectives and the combined training loss.
//!
//! Alignment pushes projected denoiser hidden states toward frozen teacher
//! features, patch by patch. The cosine form maximizes mean patch-wise
//! similarity; the contrastive form treats matching (sample, patch) pairs
//! as positives against the rest of the pool. Both are added to the
//! denoising loss with weight `lambda`; `lambda = 0` must leave the
//! baseline loss untouched down to the bit, which is why `combined_loss`
//! returns the denoising node itself in that case.

use crate::error::{contract_err, Result};
use crate::numerics::tape::{Tape, Var};
use alloc::sync::Arc;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Cosine,
    NtXent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepaConfig {
    /// Weight of the alignment term; 0 disables alignment entirely.
    pub lambda: f32,
    pub objective: Objective,
    /// Softmax temperature for the contrastive objective.
    pub temperature: f32,
    /// Block whose output is aligned (1-based).
    pub depth: usize,
    /// Hidden width of the projection head; 0 means "denoiser dim".
    pub proj_hidden: usize,
}

impl Default for RepaConfig {
    fn default() -> Self {
        RepaConfig { lambda: 0.5, objective: Objective::Cosine, temperature: 0.1, depth: 2, proj_hidden: 0 }
    }
}

impl RepaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return contract_err("repa_config", "lambda must be finite and >= 0");
        }
        if self.temperature <= 0.0 {
            return contract_err("repa_config", "temperature must be positive");
        }
        if self.lambda > 0.0 && self.depth == 0 {
            return contract_err("repa_config", "alignment depth is 1-based");
        }
        Ok(())
    }

    pub fn enabled(&self) -> bool {
        self.lambda > 0.0
    }
}

const COS_EPS: f32 = 1e-8;

fn flatten_rows(tape: &mut Tape, v: Var, op: &'static str) -> Result<(Var, usize, usize)> {
    let shape = tape.value(v).shape().to_vec();
    if shape.len() < 2 {
        return crate::error::shape_err(op, alloc::format!("want patch rows, got {shape:?}"));
    }
    let d = *shape.last().unwrap();
    let rows = tape.value(v).leading();
    let flat = tape.reshape(v, &[rows, d])?;
    Ok((flat, rows, d))
}

/// Negative mean patch-wise cosine similarity between projected student
/// features and teacher features of the same shape. Minimizing drives every
/// patch representation parallel to its teacher row.
pub fn repa_cosine(tape: &mut Tape, student: Var, teacher: Var) -> Result<Var> {
    let cos = tape.cosine_sim_rows(student, teacher, COS_EPS)?;
    let mean = tape.mean_all(cos)?;
    tape.scale(mean, -1.0)
}

/// One-directional InfoNCE over the pooled (sample x patch) rows: each
/// normalized student row must pick out its own teacher row among all
/// teacher rows at temperature `tau`.
pub fn repa_ntxent(tape: &mut Tape, student: Var, teacher: Var, tau: f32) -> Result<Var> {
    if tau <= 0.0 {
        return contract_err("repa_ntxent", "temperature must be positive");
    }
    if tape.value(student).shape() != tape.value(teacher).shape() {
        return crate::error::shape_err(
            "repa_ntxent",
            alloc::format!(
                "{:?} vs {:?}",
                tape.value(student).shape(),
                tape.value(teacher).shape()
            ),
        );
    }
    let (s_flat, rows, _) = flatten_rows(tape, student, "repa_ntxent")?;
    let (t_flat, _, _) = flatten_rows(tape, teacher, "repa_ntxent")?;
    let z = tape.l2_normalize_rows(s_flat, COS_EPS)?;
    let y = tape.l2_normalize_rows(t_flat, COS_EPS)?;
    let sim = tape.matmul_nt(z, y)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    let logp = tape.log_softmax(logits)?;
    // Positives sit on the diagonal.
    let diag: Vec<u32> = (0..rows).map(|r| (r * rows + r) as u32).collect();
    let pos = tape.reindex(logp, Arc::new(diag), &[rows])?;
    let mean = tape.mean_all(pos)?;
    tape.scale(mean, -1.0)
}

/// `denoise + lambda * align`. With alignment absent or weightless the
/// denoising node is returned unchanged so the baseline path is bit-equal
/// to a build without alignment.
pub fn combined_loss(
    tape: &mut Tape,
    denoise_loss: Var,
    align_loss: Option<Var>,
    lambda: f32,
) -> Result<Var> {
    match align_loss {
        Some(a) if lambda > 0.0 => {
            let scaled = tape.scale(a, lambda)?;
            tape.add(denoise_loss, scaled)
        }
        _ => Ok(denoise_loss),
    }
}
