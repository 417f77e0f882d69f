//! Reverse-mode autodiff on a linear tape (Wengert list).
//!
//! Nodes are appended in execution order into an arena; `backward` replays
//! them in reverse, accumulating gradients per node. Ops are deliberately
//! coarse (whole attention layers, fused modulation) so the hot loops stay in
//! kernel code instead of graph bookkeeping, and so every matmul runs in the
//! fast row-broadcast form.
//!
//! Contracts enforced everywhere:
//! - shape checks at op creation, not at backward time;
//! - every forward output and every produced gradient is finite-scanned and
//!   a violation aborts with the offending op's name;
//! - gradients are only computed along paths that reach a `requires_grad`
//!   leaf, so constant inputs (targets, teacher features) cost nothing.

use crate::error::{shape_err, Error, Result};
use crate::numerics::gemm::{gemm_nn, gemm_tn, transpose};
use crate::numerics::tensor::Tensor;
use alloc::sync::Arc;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// x[.., k] * w[k, n] + b[n]
    Linear { x: Var, w: Var, b: Option<Var> },
    /// a[r, d] * b[p, d]^T -> [r, p]
    MatmulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f32 },
    Silu { x: Var },
    Gelu { x: Var },
    Exp { x: Var },
    Log { x: Var },
    /// Zero-mean unit-variance over the last axis, no affine.
    LayerNorm { x: Var },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    /// out[i] = x[idx[i]]; the universal gather (slices, transposes, diags).
    Reindex { x: Var, idx: Arc<Vec<u32>> },
    /// out[r, :] = table[ids[r], :]
    GatherRows { table: Var, ids: Arc<Vec<u32>> },
    /// Multi-head self-attention over packed qkv [b, n, 3d].
    Attention { qkv: Var, heads: usize },
    /// x[b,n,d] * (1 + scale[b,d]) + shift[b,d]
    Modulate { x: Var, shift: Var, scale: Var },
    /// x[b,n,d] + gate[b,d] * y[b,n,d]
    GateAdd { x: Var, y: Var, gate: Var },
    MeanAll { x: Var },
    SumAll { x: Var },
    /// mean((a - b)^2) as a scalar.
    MseLoss { a: Var, b: Var },
    /// Row-wise cosine similarity over the last axis: [r, d] x [r, d] -> [r].
    CosineSimRows { a: Var, b: Var, eps: f32 },
    /// x / max(norm(x), eps) per row.
    L2NormalizeRows { x: Var, eps: f32 },
    Reshape { x: Var },
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    /// Reciprocal std per row.
    LayerNorm(Vec<f32>),
    /// Attention probabilities [b, h, n, n].
    Attention(Vec<f32>),
}

struct Node {
    op: Op,
    value: Tensor,
    aux: Aux,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients by node, filled in by `backward`.
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.by_node[v.0].take()
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }
}

fn check_finite(op: &'static str, data: &[f32]) -> Result<()> {
    // Branch-free (a float is non-finite iff its exponent field is
    // saturated) so the scan vectorizes; it runs over every tensor the
    // tape produces.
    let mut bad = 0u32;
    for &v in data {
        bad |= ((v.to_bits() & 0x7f80_0000) == 0x7f80_0000) as u32;
    }
    if bad == 0 {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Linear { .. } => "linear",
        Op::MatmulNT { .. } => "matmul_nt",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Silu { .. } => "silu",
        Op::Gelu { .. } => "gelu",
        Op::Exp { .. } => "exp",
        Op::Log { .. } => "log",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax { .. } => "softmax",
        Op::LogSoftmax { .. } => "log_softmax",
        Op::Reindex { .. } => "reindex",
        Op::GatherRows { .. } => "gather_rows",
        Op::Attention { .. } => "attention",
        Op::Modulate { .. } => "modulate",
        Op::GateAdd { .. } => "gate_add",
        Op::MeanAll { .. } => "mean_all",
        Op::SumAll { .. } => "sum_all",
        Op::MseLoss { .. } => "mse_loss",
        Op::CosineSimRows { .. } => "cosine_sim_rows",
        Op::L2NormalizeRows { .. } => "l2_normalize_rows",
        Op::Reshape { .. } => "reshape",
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + fast_expf(-x))
}

/// Rational minimax tanh (|err| < 1e-7 over the clamp range). A library call
/// per element dominates the MLP otherwise; this form inlines and
/// vectorizes. Forward and backward share it, so autodiff stays exact for
/// the function actually computed.
/// Range-reduced polynomial expf (|rel err| < 2e-7). Softmax rows call this
/// per element; the libm double-precision exp was a large share of a
/// training step.
#[inline]
fn fast_expf(x: f32) -> f32 {
    let x = x.clamp(-87.0, 88.0);
    // Round to nearest via the 1.5*2^23 shift; exact for |t| < 2^22.
    let t = x * core::f32::consts::LOG2_E;
    let k = (t + 12_582_912.0) - 12_582_912.0;
    let f = x - k * 0.693_359_4 + k * 2.121_944_4e-4;
    let mut p = 1.987_569_1e-4_f32;
    p = p * f + 1.398_199_9e-3;
    p = p * f + 8.333_452e-3;
    p = p * f + 4.166_579_6e-2;
    p = p * f + 1.666_666_6e-1;
    p = p * f + 5e-1;
    let e = p * f * f + f + 1.0;
    let pow2k = f32::from_bits((((k as i32) + 127) << 23) as u32);
    e * pow2k
}

#[inline]
fn fast_tanhf(x: f32) -> f32 {
    let x = x.clamp(-9.0, 9.0);
    let x2 = x * x;
    let mut p = -2.760_768_4e-16_f32;
    p = p * x2 + 2.000_188e-13;
    p = p * x2 + -8.604_672e-11;
    p = p * x2 + 5.122_297_3e-8;
    p = p * x2 + 1.485_722_35e-5;
    p = p * x2 + 6.372_619_5e-4;
    p = p * x2 + 4.893_524_6e-3;
    p *= x;
    let mut q = 1.198_258_4e-6_f32;
    q = q * x2 + 1.185_347_1e-4;
    q = q * x2 + 2.268_434_7e-3;
    q = q * x2 + 4.893_525e-3;
    p / q
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op, value: Tensor, aux: Aux, needs_grad: bool) -> Result<Var> {
        check_finite(op_name(&op), value.data())?;
        self.nodes.push(Node { op, value, aux, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Insert an input tensor; it participates in backward iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let ng = t.requires_grad();
        self.nodes.push(Node { op: Op::Leaf, value: t, aux: Aux::None, needs_grad: ng });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: t, aux: Aux::None, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    // ---- op constructors ------------------------------------------------

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x), self.value(w));
        if ws.shape().len() != 2 {
            return shape_err("linear", alloc::format!("weight must be rank 2, got {:?}", ws.shape()));
        }
        let (k, n) = (ws.shape()[0], ws.shape()[1]);
        if xs.last_dim() != k {
            return shape_err(
                "linear",
                alloc::format!("x last dim {} != weight rows {}", xs.last_dim(), k),
            );
        }
        if let Some(bv) = b {
            let bs = self.value(bv);
            if bs.shape() != [n] {
                return shape_err("linear", alloc::format!("bias shape {:?} != [{n}]", bs.shape()));
            }
        }
        let m = xs.leading();
        let mut out = alloc::vec![0f32; m * n];
        if let Some(bv) = b {
            let bias = self.value(bv).data();
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        gemm_nn(self.value(x).data(), self.value(w).data(), &mut out, m, k, n);
        let mut shape: Vec<usize> = self.value(x).shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|bv| self.needs(bv));
        self.push(Op::Linear { x, w, b }, Tensor::new(&shape, out)?, Aux::None, ng)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return shape_err("matmul_nt", alloc::format!("want [r,d]x[p,d], got {sa:?} x {sb:?}"));
        }
        let (r, d, p) = (sa[0], sa[1], sb[0]);
        let bt = transpose(self.value(b).data(), p, d);
        let mut out = alloc::vec![0f32; r * p];
        gemm_nn(self.value(a).data(), &bt, &mut out, r, d, p);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatmulNT { a, b }, Tensor::new(&[r, p], out)?, Aux::None, ng)
    }

    fn binary_same_shape(&mut self, opname: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(
                opname,
                alloc::format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            );
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let out: Vec<f32> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.value(a).shape(), out)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add { a, b }, t, Aux::None, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let out: Vec<f32> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(self.value(a).shape(), out)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub { a, b }, t, Aux::None, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let out: Vec<f32> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.value(a).shape(), out)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul { a, b }, t, Aux::None, ng)
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let out: Vec<f32> = self.value(x).data().iter().map(|v| v * c).collect();
        let t = Tensor::new(self.value(x).shape(), out)?;
        let ng = self.needs(x);
        self.push(Op::Scale { x, c }, t, Aux::None, ng)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f32> = self.value(x).data().iter().map(|&v| v * sigmoid(v)).collect();
        let t = Tensor::new(self.value(x).shape(), out)?;
        let ng = self.needs(x);
        self.push(Op::Silu { x }, t, Aux::None, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f32> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + fast_tanhf(GELU_C * (v + GELU_A * v * v * v))))
            .collect();
        let t = Tensor::new(self.value(x).shape(), out)?;
        let ng = self.needs(x);
        self.push(Op::Gelu { x }, t, Aux::None, ng)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f32> = self.value(x).data().iter().map(|&v| libm::expf(v)).collect();
        let t = Tensor::new(self.value(x).shape(), out)?;
        let ng = self.needs(x);
        self.push(Op::Exp { x }, t, Aux::None, ng)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f32> = self.value(x).data().iter().map(|&v| libm::logf(v)).collect();
        let t = Tensor::new(self.value(x).shape(), out)?;
        let ng = self.needs(x);
        self.push(Op::Log { x }, t, Aux::None, ng)
    }

    pub fn layer_norm(&mut self, x: Var, eps: f32) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d == 0 {
            return shape_err("layer_norm", "empty last axis");
        }
        let rows = self.value(x).leading();
        let mut out = alloc::vec![0f32; rows * d];
        let mut rstds = alloc::vec![0f32; rows];
        {
            let data = self.value(x).data();
            for r in 0..rows {
                let row = &data[r * d..(r + 1) * d];
                // f64 accumulation: mean and variance are reductions.
                let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                let var = row.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>()
                    / d as f64;
                let rstd = 1.0 / libm::sqrt(var + eps as f64);
                rstds[r] = rstd as f32;
                let orow = &mut out[r * d..(r + 1) * d];
                for j in 0..d {
                    orow[j] = ((row[j] as f64 - mean) * rstd) as f32;
                }
            }
        }
        let t = Tensor::new(self.value(x).shape(), out)?;
        let ng = self.needs(x);
        self.push(Op::LayerNorm { x }, t, Aux::LayerNorm(rstds), ng)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        let rows = self.value(x).leading();
        let mut out = alloc::vec![0f32; rows * d];
        {
            let data = self.value(x).data();
            for r in 0..rows {
                softmax_row(&data[r * d..(r + 1) * d], &mut out[r * d..(r + 1) * d]);
            }
        }
        let t = Tensor::new(self.value(x).shape(), out)?;
        let ng = self.needs(x);
        self.push(Op::Softmax { x }, t, Aux::None, ng)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        let rows = self.value(x).leading();
        let mut out = alloc::vec![0f32; rows * d];
        {
            let data = self.value(x).data();
            for r in 0..rows {
                let row = &data[r * d..(r + 1) * d];
                let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
                let lse =
                    libm::log(row.iter().map(|&v| libm::exp((v - m) as f64)).sum::<f64>()) + m as f64;
                let orow = &mut out[r * d..(r + 1) * d];
                for j in 0..d {
                    orow[j] = (row[j] as f64 - lse) as f32;
                }
            }
        }
        let t = Tensor::new(self.value(x).shape(), out)?;
        let ng = self.needs(x);
        self.push(Op::LogSoftmax { x }, t, Aux::None, ng)
    }

    /// `out[i] = x[idx[i]]`; `idx.len()` must equal the product of
    /// `out_shape`. Backward scatter-adds, so duplicate indices broadcast in
    /// forward and sum in reverse.
    pub fn reindex(&mut self, x: Var, idx: Arc<Vec<u32>>, out_shape: &[usize]) -> Result<Var> {
        let numel: usize = out_shape.iter().product();
        if idx.len() != numel {
            return shape_err("reindex", alloc::format!("{} indices for shape {out_shape:?}", idx.len()));
        }
        let src = self.value(x).data();
        let n = src.len() as u32;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return shape_err("reindex", alloc::format!("index {bad} out of range {n}"));
        }
        let out: Vec<f32> = idx.iter().map(|&i| src[i as usize]).collect();
        let t = Tensor::new(out_shape, out)?;
        let ng = self.needs(x);
        self.push(Op::Reindex { x, idx }, t, Aux::None, ng)
    }

    pub fn gather_rows(&mut self, table: Var, ids: Arc<Vec<u32>>) -> Result<Var> {
        let ts = self.value(table).shape();
        if ts.len() != 2 {
            return shape_err("gather_rows", alloc::format!("table must be rank 2, got {ts:?}"));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return shape_err("gather_rows", alloc::format!("row {bad} out of range {v}"));
        }
        let src = self.value(table).data();
        let mut out = alloc::vec![0f32; ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&src[id as usize * d..(id as usize + 1) * d]);
        }
        let t = Tensor::new(&[ids.len(), d], out)?;
        let ng = self.needs(table);
        self.push(Op::GatherRows { table, ids }, t, Aux::None, ng)
    }

    /// Multi-head self-attention. `qkv` is [b, n, 3d] packed as q|k|v along
    /// the last axis; output is [b, n, d].
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let s = self.value(qkv).shape().to_vec();
        if s.len() != 3 || !s[2].is_multiple_of(3) {
            return shape_err("attention", alloc::format!("want [b,n,3d], got {s:?}"));
        }
        let (b, n, d) = (s[0], s[1], s[2] / 3);
        if heads == 0 || d % heads != 0 {
            return shape_err("attention", alloc::format!("dim {d} not divisible by {heads} heads"));
        }
        let hd = d / heads;
        let scale = 1.0 / libm::sqrtf(hd as f32);
        let data = self.value(qkv).data();
        let mut out = alloc::vec![0f32; b * n * d];
        let mut probs = alloc::vec![0f32; b * heads * n * n];
        let row = 3 * d;
        // Per-head contiguous copies: kt is [hd, n] so the score loop
        // broadcasts over keys, vh is [n, hd] so the value mix streams rows.
        let mut kt = alloc::vec![0f32; hd * n];
        let mut vh = alloc::vec![0f32; n * hd];
        let mut scores = alloc::vec![0f32; n];
        for bi in 0..b {
            let base = bi * n * row;
            for h in 0..heads {
                let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
                let pbase = (bi * heads + h) * n * n;
                for j in 0..n {
                    for l in 0..hd {
                        kt[l * n + j] = data[base + j * row + ko + l];
                    }
                    vh[j * hd..j * hd + hd]
                        .copy_from_slice(&data[base + j * row + vo..base + j * row + vo + hd]);
                }
                for i in 0..n {
                    let q = &data[base + i * row + qo..base + i * row + qo + hd];
                    scores.iter_mut().for_each(|s| *s = 0.0);
                    for (l, &ql) in q.iter().enumerate() {
                        let kr = &kt[l * n..(l + 1) * n];
                        for j in 0..n {
                            scores[j] += ql * kr[j];
                        }
                    }
                    scores.iter_mut().for_each(|s| *s *= scale);
                    let p = &mut probs[pbase + i * n..pbase + (i + 1) * n];
                    softmax_row(&scores, p);
                    let orow = &mut out[bi * n * d + i * d + h * hd..bi * n * d + i * d + h * hd + hd];
                    for (j, &pj) in p.iter().enumerate() {
                        let v = &vh[j * hd..(j + 1) * hd];
                        for l in 0..hd {
                            orow[l] += pj * v[l];
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[b, n, d], out)?;
        let ng = self.needs(qkv);
        self.push(Op::Attention { qkv, heads }, t, Aux::Attention(probs), ng)
    }

    /// `x * (1 + scale) + shift` with per-sample shift/scale broadcast over
    /// the token axis: x is [b, n, d], shift and scale are [b, d].
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return shape_err("modulate", alloc::format!("x must be [b,n,d], got {xs:?}"));
        }
        let (b, n, d) = (xs[0], xs[1], xs[2]);
        for (nm, v) in [("shift", shift), ("scale", scale)] {
            if self.value(v).shape() != [b, d] {
                return shape_err(
                    "modulate",
                    alloc::format!("{nm} shape {:?} != [{b},{d}]", self.value(v).shape()),
                );
            }
        }
        let mut out = alloc::vec![0f32; b * n * d];
        {
            let xv = self.value(x).data();
            let sh = self.value(shift).data();
            let sc = self.value(scale).data();
            for bi in 0..b {
                let shr = &sh[bi * d..(bi + 1) * d];
                let scr = &sc[bi * d..(bi + 1) * d];
                for i in 0..n {
                    let o = bi * n * d + i * d;
                    let xrow = &xv[o..o + d];
                    let orow = &mut out[o..o + d];
                    for j in 0..d {
                        orow[j] = xrow[j] * (1.0 + scr[j]) + shr[j];
                    }
                }
            }
        }
        let t = Tensor::new(&xs, out)?;
        let ng = self.needs(x) || self.needs(shift) || self.needs(scale);
        self.push(Op::Modulate { x, shift, scale }, t, Aux::None, ng)
    }

    /// `x + gate * y` with gate [b, d] broadcast over tokens.
    pub fn gate_add(&mut self, x: Var, y: Var, gate: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return shape_err("gate_add", alloc::format!("x must be [b,n,d], got {xs:?}"));
        }
        let (b, n, d) = (xs[0], xs[1], xs[2]);
        if self.value(y).shape() != xs.as_slice() {
            return shape_err("gate_add", "x and y shapes differ");
        }
        if self.value(gate).shape() != [b, d] {
            return shape_err("gate_add", "gate must be [b,d]");
        }
        let mut out = alloc::vec![0f32; b * n * d];
        {
            let xv = self.value(x).data();
            let yv = self.value(y).data();
            let g = self.value(gate).data();
            for bi in 0..b {
                let gr = &g[bi * d..(bi + 1) * d];
                for i in 0..n {
                    let o = bi * n * d + i * d;
                    for j in 0..d {
                        out[o + j] = xv[o + j] + gr[j] * yv[o + j];
                    }
                }
            }
        }
        let t = Tensor::new(&xs, out)?;
        let ng = self.needs(x) || self.needs(y) || self.needs(gate);
        self.push(Op::GateAdd { x, y, gate }, t, Aux::None, ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return shape_err("mean_all", "empty tensor");
        }
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let t = Tensor::scalar((s / n as f64) as f32);
        let ng = self.needs(x);
        self.push(Op::MeanAll { x }, t, Aux::None, ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let t = Tensor::scalar(s as f32);
        let ng = self.needs(x);
        self.push(Op::SumAll { x }, t, Aux::None, ng)
    }

    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mse_loss", a, b)?;
        let n = self.value(a).numel();
        if n == 0 {
            return shape_err("mse_loss", "empty tensor");
        }
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| {
                let d = (x - y) as f64;
                d * d
            })
            .sum();
        let t = Tensor::scalar((s / n as f64) as f32);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MseLoss { a, b }, t, Aux::None, ng)
    }

    pub fn cosine_sim_rows(&mut self, a: Var, b: Var, eps: f32) -> Result<Var> {
        self.binary_same_shape("cosine_sim_rows", a, b)?;
        let d = self.value(a).last_dim();
        let rows = self.value(a).leading();
        let mut out = alloc::vec![0f32; rows];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for r in 0..rows {
                let (ar, br) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
                let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
                for j in 0..d {
                    dot += ar[j] as f64 * br[j] as f64;
                    na += ar[j] as f64 * ar[j] as f64;
                    nb += br[j] as f64 * br[j] as f64;
                }
                let denom = (libm::sqrt(na) * libm::sqrt(nb)).max(eps as f64);
                out[r] = (dot / denom) as f32;
            }
        }
        let t = Tensor::new(&[rows], out)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::CosineSimRows { a, b, eps }, t, Aux::None, ng)
    }

    pub fn l2_normalize_rows(&mut self, x: Var, eps: f32) -> Result<Var> {
        let d = self.value(x).last_dim();
        let rows = self.value(x).leading();
        let mut out = alloc::vec![0f32; rows * d];
        {
            let xv = self.value(x).data();
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let n2: f64 = row.iter().map(|&v| v as f64 * v as f64).sum();
                let denom = libm::sqrt(n2).max(eps as f64);
                let orow = &mut out[r * d..(r + 1) * d];
                for j in 0..d {
                    orow[j] = (row[j] as f64 / denom) as f32;
                }
            }
        }
        let t = Tensor::new(self.value(x).shape(), out)?;
        let ng = self.needs(x);
        self.push(Op::L2NormalizeRows { x, eps }, t, Aux::None, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let ng = self.needs(x);
        self.push(Op::Reshape { x }, t, Aux::None, ng)
    }

    // ---- reverse pass ----------------------------------------------------

    /// Backpropagate from a scalar root. Returns per-node gradients; only
    /// paths reaching a `requires_grad` leaf are populated.
    pub fn backward(&mut self, root: Var) -> Result<Grads> {
        if self.value(root).numel() != 1 {
            return shape_err("backward", "root must be a scalar");
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            self.step_back(id, &gout, &mut grads)?;
            // Leaves keep their gradient; interior grads are dropped after
            // use unless someone re-reads them (grad checks read leaves only).
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(gout);
            }
        }
        Ok(Grads { by_node: grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor>],
        v: Var,
        contrib: Tensor,
        op: &'static str,
    ) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        check_finite(op, contrib.data())?;
        match &mut grads[v.0] {
            Some(g) => {
                debug_assert_eq!(g.shape(), contrib.shape());
                for (a, b) in g.data_mut().iter_mut().zip(contrib.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
        Ok(())
    }

    fn step_back(&self, id: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let g = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xs = self.value(*x);
                let ws = self.value(*w);
                let (m, k, n) = (xs.leading(), ws.shape()[0], ws.shape()[1]);
                if self.needs(*x) {
                    let wt = transpose(ws.data(), k, n);
                    let mut dx = alloc::vec![0f32; m * k];
                    gemm_nn(g, &wt, &mut dx, m, n, k);
                    self.accumulate(grads, *x, Tensor::new(xs.shape(), dx)?, "linear.dx")?;
                }
                if self.needs(*w) {
                    let mut dw = alloc::vec![0f32; k * n];
                    gemm_tn(xs.data(), g, &mut dw, m, k, n);
                    self.accumulate(grads, *w, Tensor::new(&[k, n], dw)?, "linear.dw")?;
                }
                if let Some(bv) = b {
                    if self.needs(*bv) {
                        let mut db = alloc::vec![0f32; n];
                        for row in g.chunks_exact(n) {
                            for j in 0..n {
                                db[j] += row[j];
                            }
                        }
                        self.accumulate(grads, *bv, Tensor::new(&[n], db)?, "linear.db")?;
                    }
                }
            }
            Op::MatmulNT { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (r, d, p) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                if self.needs(*a) {
                    let mut da = alloc::vec![0f32; r * d];
                    gemm_nn(g, bv.data(), &mut da, r, p, d);
                    self.accumulate(grads, *a, Tensor::new(&[r, d], da)?, "matmul_nt.da")?;
                }
                if self.needs(*b) {
                    let mut db = alloc::vec![0f32; p * d];
                    gemm_tn(g, av.data(), &mut db, r, p, d);
                    self.accumulate(grads, *b, Tensor::new(&[p, d], db)?, "matmul_nt.db")?;
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gout.clone(), "add.da")?;
                self.accumulate(grads, *b, gout.clone(), "add.db")?;
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, gout.clone(), "sub.da")?;
                if self.needs(*b) {
                    let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                    self.accumulate(grads, *b, Tensor::new(gout.shape(), neg)?, "sub.db")?;
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da: Vec<f32> =
                        g.iter().zip(self.value(*b).data()).map(|(gv, bv)| gv * bv).collect();
                    self.accumulate(grads, *a, Tensor::new(gout.shape(), da)?, "mul.da")?;
                }
                if self.needs(*b) {
                    let db: Vec<f32> =
                        g.iter().zip(self.value(*a).data()).map(|(gv, av)| gv * av).collect();
                    self.accumulate(grads, *b, Tensor::new(gout.shape(), db)?, "mul.db")?;
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    let dx: Vec<f32> = g.iter().map(|v| v * c).collect();
                    self.accumulate(grads, *x, Tensor::new(gout.shape(), dx)?, "scale.dx")?;
                }
            }
            Op::Silu { x } => {
                if self.needs(*x) {
                    let dx: Vec<f32> = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(gv, &xv)| {
                            let s = sigmoid(xv);
                            gv * (s + xv * s * (1.0 - s))
                        })
                        .collect();
                    self.accumulate(grads, *x, Tensor::new(gout.shape(), dx)?, "silu.dx")?;
                }
            }
            Op::Gelu { x } => {
                if self.needs(*x) {
                    let dx: Vec<f32> = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(gv, &xv)| {
                            let inner = GELU_C * (xv + GELU_A * xv * xv * xv);
                            let u = fast_tanhf(inner);
                            let du = (1.0 - u * u) * GELU_C * (1.0 + 3.0 * GELU_A * xv * xv);
                            gv * (0.5 * (1.0 + u) + 0.5 * xv * du)
                        })
                        .collect();
                    self.accumulate(grads, *x, Tensor::new(gout.shape(), dx)?, "gelu.dx")?;
                }
            }
            Op::Exp { x } => {
                if self.needs(*x) {
                    let dx: Vec<f32> = g.iter().zip(node.value.data()).map(|(gv, ov)| gv * ov).collect();
                    self.accumulate(grads, *x, Tensor::new(gout.shape(), dx)?, "exp.dx")?;
                }
            }
            Op::Log { x } => {
                if self.needs(*x) {
                    let dx: Vec<f32> =
                        g.iter().zip(self.value(*x).data()).map(|(gv, xv)| gv / xv).collect();
                    self.accumulate(grads, *x, Tensor::new(gout.shape(), dx)?, "log.dx")?;
                }
            }
            Op::LayerNorm { x, .. } => {
                if self.needs(*x) {
                    let Aux::LayerNorm(rstds) = &node.aux else { unreachable!() };
                    let d = node.value.last_dim();
                    let rows = node.value.leading();
                    let y = node.value.data();
                    let mut dx = alloc::vec![0f32; rows * d];
                    for r in 0..rows {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut gsum = 0f64;
                        let mut gysum = 0f64;
                        for j in 0..d {
                            gsum += gr[j] as f64;
                            gysum += gr[j] as f64 * yr[j] as f64;
                        }
                        let gmean = gsum / d as f64;
                        let gymean = gysum / d as f64;
                        let rstd = rstds[r] as f64;
                        let drow = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            drow[j] =
                                ((gr[j] as f64 - gmean - yr[j] as f64 * gymean) * rstd) as f32;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(node.value.shape(), dx)?, "layer_norm.dx")?;
                }
            }
            Op::Softmax { x } => {
                if self.needs(*x) {
                    let d = node.value.last_dim();
                    let rows = node.value.leading();
                    let y = node.value.data();
                    let mut dx = alloc::vec![0f32; rows * d];
                    for r in 0..rows {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
                        let drow = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            drow[j] = yr[j] * (gr[j] - dot as f32);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(node.value.shape(), dx)?, "softmax.dx")?;
                }
            }
            Op::LogSoftmax { x } => {
                if self.needs(*x) {
                    let d = node.value.last_dim();
                    let rows = node.value.leading();
                    let y = node.value.data();
                    let mut dx = alloc::vec![0f32; rows * d];
                    for r in 0..rows {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let gsum: f64 = gr.iter().map(|&v| v as f64).sum();
                        let drow = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            drow[j] = gr[j] - (libm::exp(yr[j] as f64) * gsum) as f32;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(node.value.shape(), dx)?, "log_softmax.dx")?;
                }
            }
            Op::Reindex { x, idx } => {
                if self.needs(*x) {
                    let mut dx = alloc::vec![0f32; self.value(*x).numel()];
                    for (i, &src) in idx.iter().enumerate() {
                        dx[src as usize] += g[i];
                    }
                    self.accumulate(grads, *x, Tensor::new(self.value(*x).shape(), dx)?, "reindex.dx")?;
                }
            }
            Op::GatherRows { table, ids } => {
                if self.needs(*table) {
                    let ts = self.value(*table).shape();
                    let d = ts[1];
                    let mut dt = alloc::vec![0f32; ts[0] * d];
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                        let src = &g[r * d..(r + 1) * d];
                        for j in 0..d {
                            dst[j] += src[j];
                        }
                    }
                    self.accumulate(grads, *table, Tensor::new(ts, dt)?, "gather_rows.dt")?;
                }
            }
            Op::Attention { qkv, heads } => {
                if self.needs(*qkv) {
                    let dq = self.attention_backward(*qkv, *heads, &node.aux, g)?;
                    self.accumulate(grads, *qkv, dq, "attention.dqkv")?;
                }
            }
            Op::Modulate { x, shift, scale } => {
                let xs = self.value(*x).shape();
                let (b, n, d) = (xs[0], xs[1], xs[2]);
                let xv = self.value(*x).data();
                let sc = self.value(*scale).data();
                if self.needs(*x) {
                    let mut dx = alloc::vec![0f32; b * n * d];
                    for bi in 0..b {
                        let scr = &sc[bi * d..(bi + 1) * d];
                        for i in 0..n {
                            let o = bi * n * d + i * d;
                            for j in 0..d {
                                dx[o + j] = g[o + j] * (1.0 + scr[j]);
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xs, dx)?, "modulate.dx")?;
                }
                if self.needs(*shift) {
                    let mut ds = alloc::vec![0f32; b * d];
                    for bi in 0..b {
                        for i in 0..n {
                            let o = bi * n * d + i * d;
                            for j in 0..d {
                                ds[bi * d + j] += g[o + j];
                            }
                        }
                    }
                    self.accumulate(grads, *shift, Tensor::new(&[b, d], ds)?, "modulate.dshift")?;
                }
                if self.needs(*scale) {
                    let mut ds = alloc::vec![0f32; b * d];
                    for bi in 0..b {
                        for i in 0..n {
                            let o = bi * n * d + i * d;
                            for j in 0..d {
                                ds[bi * d + j] += g[o + j] * xv[o + j];
                            }
                        }
                    }
                    self.accumulate(grads, *scale, Tensor::new(&[b, d], ds)?, "modulate.dscale")?;
                }
            }
            Op::GateAdd { x, y, gate } => {
                let xs = self.value(*x).shape();
                let (b, n, d) = (xs[0], xs[1], xs[2]);
                let yv = self.value(*y).data();
                let gv = self.value(*gate).data();
                self.accumulate(grads, *x, gout.clone(), "gate_add.dx")?;
                if self.needs(*y) {
                    let mut dy = alloc::vec![0f32; b * n * d];
                    for bi in 0..b {
                        let gr = &gv[bi * d..(bi + 1) * d];
                        for i in 0..n {
                            let o = bi * n * d + i * d;
                            for j in 0..d {
                                dy[o + j] = g[o + j] * gr[j];
                            }
                        }
                    }
                    self.accumulate(grads, *y, Tensor::new(xs, dy)?, "gate_add.dy")?;
                }
                if self.needs(*gate) {
                    let mut dg = alloc::vec![0f32; b * d];
                    for bi in 0..b {
                        for i in 0..n {
                            let o = bi * n * d + i * d;
                            for j in 0..d {
                                dg[bi * d + j] += g[o + j] * yv[o + j];
                            }
                        }
                    }
                    self.accumulate(grads, *gate, Tensor::new(&[b, d], dg)?, "gate_add.dgate")?;
                }
            }
            Op::MeanAll { x } => {
                if self.needs(*x) {
                    let n = self.value(*x).numel();
                    let c = g[0] / n as f32;
                    self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), c), "mean_all.dx")?;
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    self.accumulate(
                        grads,
                        *x,
                        Tensor::full(self.value(*x).shape(), g[0]),
                        "sum_all.dx",
                    )?;
                }
            }
            Op::MseLoss { a, b } => {
                let n = self.value(*a).numel() as f32;
                let c = 2.0 * g[0] / n;
                if self.needs(*a) {
                    let da: Vec<f32> = self
                        .value(*a)
                        .data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&x, &y)| c * (x - y))
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(self.value(*a).shape(), da)?, "mse_loss.da")?;
                }
                if self.needs(*b) {
                    let db: Vec<f32> = self
                        .value(*a)
                        .data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&x, &y)| -c * (x - y))
                        .collect();
                    self.accumulate(grads, *b, Tensor::new(self.value(*b).shape(), db)?, "mse_loss.db")?;
                }
            }
            Op::CosineSimRows { a, b, eps } => {
                let d = self.value(*a).last_dim();
                let rows = self.value(*a).leading();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let need_a = self.needs(*a);
                let need_b = self.needs(*b);
                let mut da = if need_a { alloc::vec![0f32; rows * d] } else { Vec::new() };
                let mut db = if need_b { alloc::vec![0f32; rows * d] } else { Vec::new() };
                for r in 0..rows {
                    let (ar, br) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
                    let (mut dot, mut na2, mut nb2) = (0f64, 0f64, 0f64);
                    for j in 0..d {
                        dot += ar[j] as f64 * br[j] as f64;
                        na2 += ar[j] as f64 * ar[j] as f64;
                        nb2 += br[j] as f64 * br[j] as f64;
                    }
                    let (na, nb) = (libm::sqrt(na2), libm::sqrt(nb2));
                    let denom = (na * nb).max(*eps as f64);
                    let cos = dot / denom;
                    let gr = g[r] as f64;
                    if need_a {
                        let inv_na2 = 1.0 / na2.max(1e-12);
                        let drow = &mut da[r * d..(r + 1) * d];
                        for j in 0..d {
                            drow[j] =
                                (gr * (br[j] as f64 / denom - cos * ar[j] as f64 * inv_na2)) as f32;
                        }
                    }
                    if need_b {
                        let inv_nb2 = 1.0 / nb2.max(1e-12);
                        let drow = &mut db[r * d..(r + 1) * d];
                        for j in 0..d {
                            drow[j] =
                                (gr * (ar[j] as f64 / denom - cos * br[j] as f64 * inv_nb2)) as f32;
                        }
                    }
                }
                if need_a {
                    self.accumulate(grads, *a, Tensor::new(self.value(*a).shape(), da)?, "cosine.da")?;
                }
                if need_b {
                    self.accumulate(grads, *b, Tensor::new(self.value(*b).shape(), db)?, "cosine.db")?;
                }
            }
            Op::L2NormalizeRows { x, eps } => {
                if self.needs(*x) {
                    let d = node.value.last_dim();
                    let rows = node.value.leading();
                    let xv = self.value(*x).data();
                    let y = node.value.data();
                    let mut dx = alloc::vec![0f32; rows * d];
                    for r in 0..rows {
                        let xr = &xv[r * d..(r + 1) * d];
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let norm = libm::sqrt(xr.iter().map(|&v| v as f64 * v as f64).sum::<f64>());
                        let denom = norm.max(*eps as f64);
                        let drow = &mut dx[r * d..(r + 1) * d];
                        if norm > *eps as f64 {
                            let ydotg: f64 =
                                yr.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
                            for j in 0..d {
                                drow[j] = ((gr[j] as f64 - yr[j] as f64 * ydotg) / denom) as f32;
                            }
                        } else {
                            for j in 0..d {
                                drow[j] = (gr[j] as f64 / denom) as f32;
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(self.value(*x).shape(), dx)?, "l2norm.dx")?;
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    let dx = gout.clone().reshaped(self.value(*x).shape())?;
                    self.accumulate(grads, *x, dx, "reshape.dx")?;
                }
            }
        }
        Ok(())
    }

    fn attention_backward(&self, qkv: Var, heads: usize, aux: &Aux, g: &[f32]) -> Result<Tensor> {
        let Aux::Attention(probs) = aux else { unreachable!() };
        let s = self.value(qkv).shape();
        let (b, n, d) = (s[0], s[1], s[2] / 3);
        let hd = d / heads;
        let scale = 1.0 / libm::sqrtf(hd as f32);
        let data = self.value(qkv).data();
        let row = 3 * d;
        let mut dqkv = alloc::vec![0f32; b * n * row];
        // Contiguous per-head copies of K and V plus gradient scratch; the
        // strided qkv layout is touched only in the gather and scatter.
        let mut kh = alloc::vec![0f32; n * hd];
        let mut vh = alloc::vec![0f32; n * hd];
        let mut dkh = alloc::vec![0f32; n * hd];
        let mut dvh = alloc::vec![0f32; n * hd];
        let mut dp = alloc::vec![0f32; n];
        let mut dq = alloc::vec![0f32; hd];
        for bi in 0..b {
            let base = bi * n * row;
            for h in 0..heads {
                let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
                let pbase = (bi * heads + h) * n * n;
                for j in 0..n {
                    kh[j * hd..(j + 1) * hd]
                        .copy_from_slice(&data[base + j * row + ko..base + j * row + ko + hd]);
                    vh[j * hd..(j + 1) * hd]
                        .copy_from_slice(&data[base + j * row + vo..base + j * row + vo + hd]);
                }
                dkh.iter_mut().for_each(|x| *x = 0.0);
                dvh.iter_mut().for_each(|x| *x = 0.0);
                for i in 0..n {
                    let go = &g[bi * n * d + i * d + h * hd..bi * n * d + i * d + h * hd + hd];
                    let p = &probs[pbase + i * n..pbase + (i + 1) * n];
                    // dV[j] += p[j] * dO[i]; dP[j] = dO[i] . V[j]
                    for j in 0..n {
                        let v = &vh[j * hd..(j + 1) * hd];
                        let dvj = &mut dvh[j * hd..(j + 1) * hd];
                        let pj = p[j];
                        let mut acc = 0f32;
                        for l in 0..hd {
                            dvj[l] += pj * go[l];
                            acc += go[l] * v[l];
                        }
                        dp[j] = acc;
                    }
                    // softmax vjp: ds = p * (dp - sum(dp * p))
                    let dot: f64 = dp.iter().zip(p).map(|(&a, &b)| a as f64 * b as f64).sum();
                    // dQ[i] += ds[j] * K[j] * scale; dK[j] += ds[j] * Q[i] * scale
                    let q = &data[base + i * row + qo..base + i * row + qo + hd];
                    dq.iter_mut().for_each(|x| *x = 0.0);
                    for j in 0..n {
                        let ds = p[j] * (dp[j] - dot as f32) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let k = &kh[j * hd..(j + 1) * hd];
                        let dkj = &mut dkh[j * hd..(j + 1) * hd];
                        for l in 0..hd {
                            dq[l] += ds * k[l];
                            dkj[l] += ds * q[l];
                        }
                    }
                    let dqi = &mut dqkv[base + i * row + qo..base + i * row + qo + hd];
                    for l in 0..hd {
                        dqi[l] += dq[l];
                    }
                }
                for j in 0..n {
                    dqkv[base + j * row + ko..base + j * row + ko + hd]
                        .copy_from_slice(&dkh[j * hd..(j + 1) * hd]);
                    dqkv[base + j * row + vo..base + j * row + vo + hd]
                        .copy_from_slice(&dvh[j * hd..(j + 1) * hd]);
                }
            }
        }
        Tensor::new(s, dqkv)
    }
}

fn softmax_row(x: &[f32], out: &mut [f32]) {
    let m = x.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0f64;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = fast_expf(v - m);
        *o = e;
        sum += e as f64;
    }
    let inv = (1.0 / sum) as f32;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn linear_forward_known_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let w = tape.leaf(t(&[3, 2], &[1., 0., 0., 1., 1., 1.]));
        let b = tape.leaf(t(&[2], &[10., 20.]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[14., 25., 20., 31.]);
    }

    #[test]
    fn mul_backward_is_other_operand() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[3], &[1., 2., 3.]).with_grad());
        let b = tape.leaf(t(&[3], &[4., 5., 6.]).with_grad());
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum_all(p).unwrap();
        let mut g = tape.backward(s).unwrap();
        assert_eq!(g.take(a).unwrap().data(), &[4., 5., 6.]);
        assert_eq!(g.take(b).unwrap().data(), &[1., 2., 3.]);
    }

    #[test]
    fn sum_and_mean_grads() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[4], &[1., 2., 3., 4.]).with_grad());
        let m = tape.mean_all(a).unwrap();
        let mut g = tape.backward(m).unwrap();
        assert_eq!(g.take(a).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn mse_matches_hand_value() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1., 3.]).with_grad());
        let b = tape.constant(t(&[2], &[0., 1.]));
        let l = tape.mse_loss(a, b).unwrap();
        // ((1)^2 + (2)^2)/2 = 2.5
        assert!((tape.value(l).data()[0] - 2.5).abs() < 1e-6);
        let mut g = tape.backward(l).unwrap();
        // d/da = 2(a-b)/n = [1, 2]
        assert_eq!(g.take(a).unwrap().data(), &[1., 2.]);
    }

    #[test]
    fn reindex_transpose_and_backward_scatter() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]).with_grad());
        // transpose via reindex
        let idx = Arc::new(alloc::vec![0u32, 3, 1, 4, 2, 5]);
        let tr = tape.reindex(a, idx, &[3, 2]).unwrap();
        assert_eq!(tape.value(tr).data(), &[1., 4., 2., 5., 3., 6.]);
        let s = tape.sum_all(tr).unwrap();
        let mut g = tape.backward(s).unwrap();
        assert_eq!(g.take(a).unwrap().data(), &[1.; 6]);
    }

    #[test]
    fn reindex_duplicate_indices_sum_in_backward() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[5., 7.]).with_grad());
        let idx = Arc::new(alloc::vec![0u32, 0, 1]);
        let y = tape.reindex(a, idx, &[3]).unwrap();
        assert_eq!(tape.value(y).data(), &[5., 5., 7.]);
        let s = tape.sum_all(y).unwrap();
        let mut g = tape.backward(s).unwrap();
        assert_eq!(g.take(a).unwrap().data(), &[2., 1.]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1., 2., 3., -1., 0., 1.]));
        let y = tape.softmax(a).unwrap();
        for row in tape.value(y).data().chunks_exact(3) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 4], &[1., 2., 3., 4., -2., 0., 2., 8.]));
        let y = tape.layer_norm(a, 1e-6).unwrap();
        for row in tape.value(y).data().chunks_exact(4) {
            let mean: f32 = row.iter().sum::<f32>() / 4.0;
            let var: f32 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 4.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn cosine_identical_rows_is_one_orthogonal_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1., 0., 3., 4.]));
        let b = tape.leaf(t(&[2, 2], &[2., 0., -4., 3.]));
        let c = tape.cosine_sim_rows(a, b, 1e-8).unwrap();
        let v = tape.value(c).data();
        assert!((v[0] - 1.0).abs() < 1e-6);
        assert!(v[1].abs() < 1e-6);
    }

    #[test]
    fn nan_in_forward_aborts_with_op_name() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1], &[-1.]));
        let err = tape.log(a).unwrap_err();
        assert_eq!(err, Error::NonFinite { op: "log" });
    }

    #[test]
    fn grad_only_flows_to_marked_leaves() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1., 2.]).with_grad());
        let b = tape.constant(t(&[2], &[3., 4.]));
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum_all(p).unwrap();
        let mut g = tape.backward(s).unwrap();
        assert!(g.take(a).is_some());
        assert!(g.take(b).is_none());
    }

    #[test]
    fn determinism_same_ops_same_bits() {
        let run = || {
            let mut rng = crate::numerics::rng::Rng::for_counter(9, crate::numerics::rng::Stream::Test, 0);
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::randn(&[4, 8], &mut rng).with_grad());
            let w = tape.leaf(Tensor::randn(&[8, 8], &mut rng).with_grad());
            let h = tape.linear(x, w, None).unwrap();
            let h = tape.gelu(h).unwrap();
            let l = tape.mean_all(h).unwrap();
            let mut g = tape.backward(l).unwrap();
            (tape.value(l).data()[0].to_bits(), g.take(w).unwrap().into_data())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1, l2);
        assert_eq!(g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
