//! Evaluation drivers: kernel alignment against the teacher, linear probing
//! of hidden states, and teacher-space Fréchet distance of generated
//! samples. All of them run on the EMA parameters from a checkpoint.

use crate::config::RunConfig;
use crate::features::hidden_features;
use crate::trainer::{resolve_teacher, Session, Teacher};
use anyhow::{bail, Context, Result};
use repalign_core::metrics::{
    cka, cknna, frechet_distance, linear_probe, mean_pool, pooled_standardized, AlignmentRow,
    FeatureSet, KernelAlignmentReport, KernelMatrix, ProbeConfig,
};
use repalign_core::model::Denoiser;
use repalign_core::numerics::optim::ParamSet;
use repalign_core::numerics::tape::Tape;
use repalign_core::numerics::tensor::Tensor;
use repalign_core::process::Interpolant;
use repalign_core::sampling::{
    sample, DenoisePredictor, GuidanceConfig, SamplerConfig, SamplerKind,
};
use repalign_core::Result as CoreResult;
use std::path::Path;

/// Generation chunk size; per-example noise streams make results
/// independent of it.
const SAMPLE_BATCH: usize = 128;

/// A checkpointed model with its EMA weights materialized for evaluation.
pub struct EvalModel {
    pub session: Session,
    pub eval_params: ParamSet,
}

pub fn load_for_eval(ckpt: &Path) -> Result<EvalModel> {
    let session = Session::resume(ckpt)
        .with_context(|| format!("loading {}", ckpt.display()))?;
    let eval_params = session.state.ema.materialize(&session.state.params);
    Ok(EvalModel { session, eval_params })
}

impl EvalModel {
    pub fn cfg(&self) -> &RunConfig {
        &self.session.cfg
    }

    /// Teacher for evaluation: the training teacher unless overridden.
    pub fn teacher(&self, spec: Option<&str>) -> Result<Teacher> {
        match spec {
            None => Ok(resolve_teacher(&self.session.cfg, &self.session.data.images)?),
            Some(s) => {
                let mut cfg = self.session.cfg.clone();
                cfg.repa.encoder = s.to_string();
                resolve_teacher(&cfg, &self.session.data.images)
            }
        }
    }

    /// Sampler defaults matched to the training process: the discrete chain
    /// must be walked at its own length, continuous kinds use the stochastic
    /// sampler.
    pub fn default_sampler(&self) -> SamplerConfig {
        let mut scfg = SamplerConfig::default();
        if let Interpolant::DdpmDiscrete(sched) = &self.session.interp {
            scfg.kind = SamplerKind::DdpmAncestral;
            scfg.steps = sched.len();
        }
        scfg
    }
}

/// Velocity (or noise) field backed by denoiser weights. `labels: None`
/// routes to the null class, which is the unconditional branch under
/// classifier-free training.
pub struct ModelField<'a> {
    pub denoiser: &'a Denoiser,
    pub params: &'a ParamSet,
}

impl DenoisePredictor for ModelField<'_> {
    fn predict(&mut self, x: &Tensor, t: f64, labels: Option<&[u32]>) -> CoreResult<Tensor> {
        let b = x.shape()[0];
        let labels = match labels {
            Some(l) => l.to_vec(),
            None => vec![self.denoiser.config().null_class(); b],
        };
        let times = vec![t as f32; b];
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let out = self.denoiser.forward(&mut tape, &bound, x, &times, &labels)?;
        Ok(tape.value(out.prediction).clone())
    }
}

/// Generate `labels.len()` images in fixed-size chunks.
pub fn generate_samples(
    model: &EvalModel,
    scfg: &SamplerConfig,
    gcfg: &GuidanceConfig,
    labels: &[u32],
    seed: u64,
) -> Result<Tensor> {
    let cfg = model.cfg();
    let size = cfg.architecture.image_size;
    let shape = [cfg.architecture.channels, size, size];
    let mut field =
        ModelField { denoiser: &model.session.denoiser, params: &model.eval_params };
    let mut out = Vec::with_capacity(labels.len() * shape[0] * size * size);
    let mut row = 0;
    while row < labels.len() {
        let take = SAMPLE_BATCH.min(labels.len() - row);
        let batch = sample(
            &mut field,
            &model.session.interp,
            scfg,
            gcfg,
            &labels[row..row + take],
            shape,
            seed,
            row as u64,
            None,
        )
        .map_err(|e| anyhow::anyhow!("{e}"))?;
        out.extend_from_slice(batch.data());
        row += take;
    }
    Tensor::new(&[labels.len(), shape[0], size, size], out).map_err(|e| anyhow::anyhow!("{e}"))
}

/// `want` row indices spread evenly over `total` rows.
pub fn subset_indices(total: usize, want: usize) -> Vec<usize> {
    let want = want.min(total);
    (0..want).map(|i| i * total / want).collect()
}

fn gather_rows(images: &Tensor, labels: &[u32], idx: &[usize]) -> (Tensor, Vec<u32>) {
    let per = images.numel() / images.shape()[0];
    let mut data = Vec::with_capacity(idx.len() * per);
    let mut lab = Vec::with_capacity(idx.len());
    for &i in idx {
        data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
        lab.push(labels[i]);
    }
    let mut shape = images.shape().to_vec();
    shape[0] = idx.len();
    (Tensor::new(&shape, data).expect("sized by construction"), lab)
}

/// CKA and CKNNA between hidden states and the teacher, one row per layer.
/// Representations are mean-pooled over patches and standardized per
/// feature before the inner-product kernel.
pub fn cknna_report(
    model: &EvalModel,
    teacher: &Teacher,
    layers: &[usize],
    k: usize,
    t: f64,
    cap: usize,
) -> Result<KernelAlignmentReport> {
    let data = &model.session.data;
    let idx = subset_indices(data.labels.len(), cap);
    if idx.len() < 2 {
        bail!("need at least 2 examples, have {}", idx.len());
    }
    let (images, labels) = gather_rows(&data.images, &data.labels, &idx);
    let teacher_raw = teacher.encode(&images, &labels, &idx)?;
    let psi = pooled_standardized(&teacher_raw, "teacher", 0, t as f32)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let l_kernel = KernelMatrix::from_features(&psi);

    let hidden = hidden_features(
        &model.session.denoiser,
        &model.eval_params,
        &model.session.interp,
        &images,
        layers,
        t,
        model.cfg().run.seed,
    )?;
    let mut rows = Vec::with_capacity(layers.len());
    for (slot, &layer) in layers.iter().enumerate() {
        let phi = pooled_standardized(&hidden[slot], "student", layer, t as f32)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        let k_kernel = KernelMatrix::from_features(&phi);
        rows.push(AlignmentRow {
            layer,
            t: t as f32,
            k,
            cka: cka(&k_kernel, &l_kernel).map_err(|e| anyhow::anyhow!("{e}"))?,
            cknna: cknna(&phi, &psi, k).map_err(|e| anyhow::anyhow!("{e}"))?,
        });
    }
    Ok(KernelAlignmentReport { rows })
}

pub fn report_csv(report: &KernelAlignmentReport) -> String {
    let mut out = String::from("layer,t,k,cka,cknna\n");
    for r in &report.rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.layer, r.t, r.k, r.cka, r.cknna));
    }
    out
}

/// Top-1 accuracy of a linear classifier on pooled hidden states at
/// (layer, t). Every fifth example is held out as the test split.
pub fn probe_accuracy(model: &EvalModel, layer: usize, t: f64, cap: usize) -> Result<f64> {
    let data = &model.session.data;
    let idx = subset_indices(data.labels.len(), cap);
    let (test_idx, train_idx): (Vec<usize>, Vec<usize>) =
        idx.iter().partition(|&&i| i % 5 == 4);
    if train_idx.len() < 2 || test_idx.is_empty() {
        bail!("dataset too small to split for probing");
    }
    let pooled = |rows: &[usize]| -> Result<(FeatureSet, Vec<u32>)> {
        let (images, labels) = gather_rows(&data.images, &data.labels, rows);
        let h = hidden_features(
            &model.session.denoiser,
            &model.eval_params,
            &model.session.interp,
            &images,
            &[layer],
            t,
            model.cfg().run.seed,
        )?;
        let set = FeatureSet::new(
            mean_pool(&h[0]).map_err(|e| anyhow::anyhow!("{e}"))?,
            "student",
            layer,
            t as f32,
        )
        .map_err(|e| anyhow::anyhow!("{e}"))?;
        Ok((set, labels))
    };
    let (train, train_labels) = pooled(&train_idx)?;
    let (test, test_labels) = pooled(&test_idx)?;
    linear_probe(
        &train,
        &train_labels,
        &test,
        &test_labels,
        model.cfg().architecture.num_classes,
        &ProbeConfig::default(),
    )
    .map_err(|e| anyhow::anyhow!("{e}"))
}

/// Teacher-space Fréchet distance between `n` generated samples (balanced
/// labels) and `n` reference examples, both mean-pooled per sample.
pub fn frechet_eval(
    model: &EvalModel,
    teacher: &Teacher,
    n: usize,
    seed: u64,
    scfg: &SamplerConfig,
    gcfg: &GuidanceConfig,
) -> Result<f64> {
    if matches!(teacher, Teacher::File(_)) {
        bail!("a file teacher indexes dataset rows and cannot encode generated images");
    }
    let classes = model.cfg().architecture.num_classes;
    let gen_labels: Vec<u32> = (0..n).map(|i| (i % classes) as u32).collect();
    let samples = generate_samples(model, scfg, gcfg, &gen_labels, seed)?;
    let gen_idx: Vec<usize> = (0..n).collect();
    let gen_raw = teacher.encode(&samples, &gen_labels, &gen_idx)?;
    let gen_set = FeatureSet::new(
        mean_pool(&gen_raw).map_err(|e| anyhow::anyhow!("{e}"))?,
        "generated",
        0,
        0.0,
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;

    let data = &model.session.data;
    let idx = subset_indices(data.labels.len(), n);
    let (ref_images, ref_labels) = gather_rows(&data.images, &data.labels, &idx);
    let ref_raw = teacher.encode(&ref_images, &ref_labels, &idx)?;
    let ref_set = FeatureSet::new(
        mean_pool(&ref_raw).map_err(|e| anyhow::anyhow!("{e}"))?,
        "reference",
        0,
        0.0,
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;
    frechet_distance(&gen_set, &ref_set).map_err(|e| anyhow::anyhow!("{e}"))
}
