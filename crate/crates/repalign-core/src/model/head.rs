//! Projection head mapping denoiser hidden states into the teacher feature
//! space: three affine layers with SiLU between them. A linear-path variant
//! exists so identity behavior is testable in isolation.

use crate::error::Result;
use crate::numerics::optim::{ParamId, ParamSet};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadActivation {
    Silu,
    /// No nonlinearity; used to verify the affine path alone.
    Identity,
}

#[derive(Debug, Clone)]
pub struct ProjectionHead {
    ids: [ParamId; 6],
    pub activation: HeadActivation,
}

const PREFIX: &str = "proj_head";

impl ProjectionHead {
    /// Xavier init, zero biases; dims `in_dim -> hidden -> hidden -> out_dim`.
    pub fn init(
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        seed: u64,
        params: &mut ParamSet,
    ) -> Self {
        let dims = [(in_dim, hidden), (hidden, hidden), (hidden, out_dim)];
        let mut ids = Vec::with_capacity(6);
        for (i, (fi, fo)) in dims.into_iter().enumerate() {
            let wname = alloc::format!("{PREFIX}/fc{}/weight", i + 1);
            let limit = libm::sqrtf(6.0 / (fi + fo) as f32);
            let mut rng = crate::numerics::rng::Rng::for_name(
                seed,
                crate::numerics::rng::Stream::ParamInit,
                &wname,
            );
            let w: Vec<f32> = (0..fi * fo).map(|_| rng.uniform(-limit, limit)).collect();
            ids.push(params.push(wname, Tensor::new(&[fi, fo], w).expect("sized")));
            ids.push(params.push(alloc::format!("{PREFIX}/fc{}/bias", i + 1), Tensor::zeros(&[fo])));
        }
        ProjectionHead { ids: [ids[0], ids[1], ids[2], ids[3], ids[4], ids[5]], activation: HeadActivation::Silu }
    }

    /// Square identity weights, zero biases, linear path: the head computes
    /// the identity map, which pins the wiring in tests.
    pub fn init_identity(dim: usize, params: &mut ParamSet) -> Self {
        let mut ids = Vec::with_capacity(6);
        for i in 0..3 {
            let mut eye = alloc::vec![0f32; dim * dim];
            for j in 0..dim {
                eye[j * dim + j] = 1.0;
            }
            ids.push(params.push(
                alloc::format!("{PREFIX}/fc{}/weight", i + 1),
                Tensor::new(&[dim, dim], eye).expect("sized"),
            ));
            ids.push(params.push(alloc::format!("{PREFIX}/fc{}/bias", i + 1), Tensor::zeros(&[dim])));
        }
        ProjectionHead {
            ids: [ids[0], ids[1], ids[2], ids[3], ids[4], ids[5]],
            activation: HeadActivation::Identity,
        }
    }

    /// Apply to hidden states of any leading shape over the input feature
    /// axis (typically [b, n, d] -> [b, n, out]).
    pub fn project(&self, tape: &mut Tape, bound: &[Var], hidden: Var) -> Result<Var> {
        let mut x = hidden;
        for layer in 0..3 {
            let w = bound[self.ids[2 * layer].0];
            let b = bound[self.ids[2 * layer + 1].0];
            x = tape.linear(x, w, Some(b))?;
            if layer < 2 && self.activation == HeadActivation::Silu {
                x = tape.silu(x)?;
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{Rng, Stream};

    #[test]
    fn identity_head_reproduces_input() {
        let mut params = ParamSet::new();
        let head = ProjectionHead::init_identity(6, &mut params);
        let mut rng = Rng::for_counter(1, Stream::Test, 0);
        let x = Tensor::randn(&[2, 3, 6], &mut rng);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let h = tape.leaf(x.clone());
        let y = head.project(&mut tape, &bound, h).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn projects_to_teacher_width_and_carries_grads() {
        let mut params = ParamSet::new();
        let head = ProjectionHead::init(8, 16, 5, 0, &mut params);
        let mut rng = Rng::for_counter(2, Stream::Test, 0);
        let x = Tensor::randn(&[4, 8], &mut rng).with_grad();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let h = tape.leaf(x);
        let y = head.project(&mut tape, &bound, h).unwrap();
        assert_eq!(tape.value(y).shape(), &[4, 5]);
        let loss = tape.mean_all(y).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        for v in &bound {
            // every head parameter sits on the loss path
            assert!(grads.take(*v).is_some());
        }
    }
}
