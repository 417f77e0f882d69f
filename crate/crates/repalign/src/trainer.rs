//! Training loop: per step, sample a batch, corrupt it, run the denoiser,
//! add the alignment term when enabled, and update parameters with AdamW
//! plus an EMA shadow.
//!
//! Every random decision is drawn from a counter-keyed stream indexed by
//! the step number, so a resumed run consumes exactly the randomness the
//! uninterrupted run would have: resume is bit-exact with no RNG state in
//! checkpoints. A numeric failure aborts and leaves the last cadence
//! checkpoint untouched on disk.

use crate::checkpoint::{load_checkpoint, save_checkpoint, TrainState};
use crate::config::RunConfig;
use crate::dataset::{generate_shapes, load_idx, ShapesDataset, NUM_CLASSES};
use anyhow::{bail, Context, Result};
use repalign_core::model::head::ProjectionHead;
use repalign_core::model::teacher::{
    DescriptorTeacher, FileTeacher, OracleTeacher, DESCRIPTOR_WIDTH,
};
use repalign_core::model::{Denoiser, DenoiserOutput};
use repalign_core::numerics::optim::{
    adamw_step, clip_global_norm, global_grad_norm, AdamWConfig, EmaState, OptimState, ParamSet,
};
use repalign_core::numerics::rng::{Rng, Stream};
use repalign_core::numerics::tape::Tape;
use repalign_core::numerics::tensor::Tensor;
use repalign_core::process::{corrupt, corrupt_ddpm, draw_times, Interpolant};
use repalign_core::repa::{combined_loss, repa_cosine, repa_ntxent, Objective, RepaConfig};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Training data plus everything the oracle teacher needs.
pub struct TrainData {
    pub images: Tensor,
    pub labels: Vec<u32>,
    pub size: usize,
}

pub fn load_train_data(cfg: &RunConfig) -> Result<TrainData> {
    match cfg.dataset.kind.as_str() {
        "shapes" => {
            let d: ShapesDataset = generate_shapes(
                cfg.architecture.image_size,
                cfg.dataset.train_size,
                cfg.dataset.seed,
            )?;
            Ok(TrainData { size: d.size, images: d.images, labels: d.labels })
        }
        "idx" => {
            let (images, labels) = load_idx(
                Path::new(&cfg.dataset.images_path),
                Path::new(&cfg.dataset.labels_path),
            )?;
            let s = images.shape().to_vec();
            if s[2] != cfg.architecture.image_size || s[3] != cfg.architecture.image_size {
                bail!(
                    "dataset images are {}x{} but the model expects {}",
                    s[2],
                    s[3],
                    cfg.architecture.image_size
                );
            }
            if let Some(&bad) =
                labels.iter().find(|&&l| l as usize >= cfg.architecture.num_classes)
            {
                bail!("label {bad} exceeds num_classes {}", cfg.architecture.num_classes);
            }
            Ok(TrainData { size: s[2], images, labels })
        }
        other => bail!("unknown dataset kind {other:?}"),
    }
}

/// Frozen target encoder for the alignment loss.
pub enum Teacher {
    Oracle(OracleTeacher),
    Descriptor(DescriptorTeacher),
    File(FileTeacher),
}

impl Teacher {
    pub fn width(&self) -> usize {
        match self {
            Teacher::Oracle(t) => t.width(),
            Teacher::Descriptor(_) => DESCRIPTOR_WIDTH,
            Teacher::File(t) => t.width(),
        }
    }

    /// Features for clean images; `indices` are dataset row ids (used by
    /// the file-backed teacher, which stores one row per dataset example).
    pub fn encode(&self, images: &Tensor, labels: &[u32], indices: &[usize]) -> Result<Tensor> {
        let f = match self {
            Teacher::Oracle(t) => t.encode(images, labels).map_err(|e| anyhow::anyhow!("{e}"))?,
            Teacher::Descriptor(t) => t.encode(images).map_err(|e| anyhow::anyhow!("{e}"))?,
            Teacher::File(t) => t.encode(indices).map_err(|e| anyhow::anyhow!("{e}"))?,
        };
        Ok(f.features)
    }
}

pub fn resolve_teacher(cfg: &RunConfig, train_images: &Tensor) -> Result<Teacher> {
    let patch = cfg.architecture.patch_size;
    match cfg.repa.encoder.as_str() {
        "oracle" => Ok(Teacher::Oracle(OracleTeacher::new(patch, NUM_CLASSES))),
        "descriptor" => Ok(Teacher::Descriptor(
            DescriptorTeacher::fit(train_images, patch).map_err(|e| anyhow::anyhow!("{e}"))?,
        )),
        other => {
            let path = other
                .strip_prefix("file:")
                .with_context(|| format!("unknown encoder {other:?}"))?;
            let bytes = std::fs::read(path).with_context(|| format!("reading {path}"))?;
            let features = repalign_core::model::teacher::rpaf::decode(&bytes)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            Ok(Teacher::File(FileTeacher::new(features).map_err(|e| anyhow::anyhow!("{e}"))?))
        }
    }
}

/// Model handles plus mutable training state.
pub struct Session {
    pub cfg: RunConfig,
    pub denoiser: Denoiser,
    pub head: Option<ProjectionHead>,
    pub state: TrainState,
    pub teacher: Teacher,
    pub data: TrainData,
    pub interp: Interpolant,
    pub repa: RepaConfig,
}

impl Session {
    /// Fresh parameters from the config's seed. The projection head exists
    /// only when the alignment loss is active, and parameter init is keyed
    /// by name, so enabling it never changes denoiser initialization.
    pub fn fresh(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let data = load_train_data(cfg)?;
        let teacher = resolve_teacher(cfg, &data.images)?;
        let repa = cfg.repa_config()?;
        let mut params = ParamSet::new();
        let denoiser = Denoiser::init(cfg.denoiser_config(), cfg.run.seed, &mut params)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        let head = if repa.enabled() {
            let hidden = if repa.proj_hidden == 0 {
                cfg.architecture.hidden_dim
            } else {
                repa.proj_hidden
            };
            Some(ProjectionHead::init(
                cfg.architecture.hidden_dim,
                hidden,
                teacher.width(),
                cfg.run.seed,
                &mut params,
            ))
        } else {
            None
        };
        if repa.enabled() && repa.depth > cfg.architecture.num_layers {
            bail!(
                "alignment depth {} exceeds {} layers",
                repa.depth,
                cfg.architecture.num_layers
            );
        }
        let opt = OptimState::new(&params);
        let ema = EmaState::new(&params, cfg.optimization.ema_decay as f32);
        let interp = cfg.interpolant()?;
        Ok(Session {
            cfg: cfg.clone(),
            denoiser,
            head,
            state: TrainState { config_json: cfg.to_json(), step: 0, params, opt, ema },
            teacher,
            data,
            interp,
            repa,
        })
    }

    /// Rebuild a session from a checkpoint, adopting its tensors into a
    /// freshly constructed parameter layout (names and shapes must agree).
    pub fn resume(path: &Path) -> Result<Self> {
        let loaded = load_checkpoint(path)?;
        let cfg = RunConfig::from_json(&loaded.config_json)?;
        Session::adopt(loaded, cfg)
    }

    /// Resume under an edited config (schedule extensions and the like).
    /// Structural drift is caught by the adoption shape checks.
    pub fn resume_with(path: &Path, cfg: RunConfig) -> Result<Self> {
        let mut loaded = load_checkpoint(path)?;
        loaded.config_json = cfg.to_json();
        Session::adopt(loaded, cfg)
    }

    fn adopt(loaded: TrainState, cfg: RunConfig) -> Result<Self> {
        let mut session = Session::fresh(&cfg)?;
        if session.state.params.len() != loaded.params.len() {
            bail!(
                "checkpoint has {} parameters, config builds {}",
                loaded.params.len(),
                session.state.params.len()
            );
        }
        for (have, want) in session.state.params.iter().zip(loaded.params.iter()) {
            if have.name != want.name || have.value.shape() != want.value.shape() {
                bail!("checkpoint parameter {} does not match model {}", want.name, have.name);
            }
        }
        session.state = loaded;
        Ok(session)
    }

    pub fn null_class(&self) -> u32 {
        self.denoiser.config().null_class()
    }

    fn gather_batch(&self, step: u64) -> (Tensor, Vec<u32>, Vec<usize>) {
        let n = self.data.labels.len();
        let b = self.cfg.optimization.batch_size;
        let px = self.data.size * self.data.size;
        let mut rng = Rng::for_counter(self.cfg.run.seed, Stream::BatchSel, step);
        let indices: Vec<usize> = (0..b).map(|_| rng.below(n as u64) as usize).collect();
        let mut images = vec![0f32; b * px];
        let mut labels = vec![0u32; b];
        for (row, &src) in indices.iter().enumerate() {
            images[row * px..(row + 1) * px]
                .copy_from_slice(&self.data.images.data()[src * px..(src + 1) * px]);
            labels[row] = self.data.labels[src];
        }
        let images = Tensor::new(&[b, 1, self.data.size, self.data.size], images)
            .expect("sized by construction");
        (images, labels, indices)
    }

    fn dropped_labels(&self, labels: &[u32], step: u64) -> Vec<u32> {
        let p = self.cfg.optimization.label_dropout as f32;
        let null = self.null_class();
        let mut rng = Rng::for_counter(self.cfg.run.seed, Stream::LabelDrop, step);
        labels.iter().map(|&l| if rng.next_f32() < p { null } else { l }).collect()
    }

    /// One optimization step. Returns (velocity loss, alignment loss,
    /// pre-clip gradient norm).
    pub fn train_step(&mut self, step: u64) -> Result<(f64, f64, f64)> {
        let (clean, labels, indices) = self.gather_batch(step);
        let cond_labels = self.dropped_labels(&labels, step);
        let b = labels.len();

        let mut noise_rng = Rng::for_counter(self.cfg.run.seed, Stream::Noise, step);
        let eps = Tensor::randn(clean.shape(), &mut noise_rng);
        let mut t_rng = Rng::for_counter(self.cfg.run.seed, Stream::Timestep, step);
        let batch = match &self.interp {
            Interpolant::DdpmDiscrete(sched) => {
                let steps: Vec<u32> =
                    (0..b).map(|_| t_rng.below(sched.len() as u64) as u32 + 1).collect();
                corrupt_ddpm(sched, &clean, &eps, &steps).map_err(|e| anyhow::anyhow!("{e}"))?
            }
            _ => {
                let t = draw_times(&mut t_rng, b, 0.0);
                corrupt(&self.interp, &clean, &eps, &t).map_err(|e| anyhow::anyhow!("{e}"))?
            }
        };

        let mut tape = Tape::new();
        let bound = self.state.params.bind(&mut tape);
        let out: DenoiserOutput = self
            .denoiser
            .forward(&mut tape, &bound, &batch.x_t, &batch.t, &cond_labels)
            .map_err(|e| anyhow::anyhow!("step {step}: {e}"))?;
        let target = tape.leaf(batch.target.clone());
        let v_loss = tape.mse_loss(out.prediction, target).map_err(|e| anyhow::anyhow!("{e}"))?;

        let (total, align_value) = if let Some(head) = &self.head {
            // The teacher sees clean inputs and true labels; dropout only
            // affects the denoiser's conditioning.
            let feats = self.teacher.encode(&clean, &labels, &indices)?;
            let teacher = tape.leaf(feats);
            let hidden =
                out.hidden_after(self.repa.depth).map_err(|e| anyhow::anyhow!("{e}"))?;
            let projected =
                head.project(&mut tape, &bound, hidden).map_err(|e| anyhow::anyhow!("{e}"))?;
            let align = match self.repa.objective {
                Objective::Cosine => repa_cosine(&mut tape, projected, teacher),
                Objective::NtXent => {
                    repa_ntxent(&mut tape, projected, teacher, self.repa.temperature)
                }
            }
            .map_err(|e| anyhow::anyhow!("{e}"))?;
            let value = tape.value(align).data()[0] as f64;
            let total = combined_loss(&mut tape, v_loss, Some(align), self.repa.lambda)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            (total, value)
        } else {
            (v_loss, 0.0)
        };

        let v_value = tape.value(v_loss).data()[0] as f64;
        let mut grads = tape.backward(total).map_err(|e| anyhow::anyhow!("step {step}: {e}"))?;
        let mut grad_vec: Vec<Option<Tensor>> =
            bound.iter().map(|&v| grads.take(v)).collect();
        let norm = global_grad_norm(&grad_vec);
        if self.cfg.optimization.grad_clip > 0.0 {
            clip_global_norm(&mut grad_vec, self.cfg.optimization.grad_clip as f32);
        }
        let opt_cfg = AdamWConfig {
            lr: self.cfg.optimization.lr as f32,
            beta1: self.cfg.optimization.betas[0] as f32,
            beta2: self.cfg.optimization.betas[1] as f32,
            eps: 1e-8,
            weight_decay: self.cfg.optimization.weight_decay as f32,
        };
        adamw_step(&mut self.state.params, &grad_vec, &mut self.state.opt, &opt_cfg)
            .map_err(|e| anyhow::anyhow!("step {step}: {e}"))?;
        self.state.ema.update(&self.state.params).map_err(|e| anyhow::anyhow!("{e}"))?;
        self.state.step = step;
        Ok((v_value, align_value, norm))
    }
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub final_step: u64,
}

/// Run (or continue) training to `training_steps`, appending CSV log rows
/// and checkpointing on the configured cadence. Paths in the config are
/// resolved relative to `out_dir`.
pub fn train(session: &mut Session, out_dir: &Path) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let log_path = out_dir.join(&session.cfg.run.log_path);
    let ckpt_path = out_dir.join(&session.cfg.run.checkpoint_path);
    let start = session.state.step;
    let total = session.cfg.optimization.training_steps;
    if start >= total {
        bail!("checkpoint is already at step {start} of {total}");
    }

    // A crash can leave log rows newer than the last checkpoint; keep only
    // rows the resumed run will not rewrite.
    if start > 0 && log_path.exists() {
        let kept: Vec<String> = std::fs::read_to_string(&log_path)?
            .lines()
            .filter(|l| {
                l.starts_with("step,")
                    || l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= start)
            })
            .map(str::to_string)
            .collect();
        std::fs::write(&log_path, kept.join("\n") + "\n")?;
    }
    let fresh_log = !log_path.exists() || start == 0;
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .truncate(false)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    if fresh_log {
        log.set_len(0)?;
        writeln!(log, "step,loss_velocity,loss_repa,grad_norm,wall_ms")?;
    }

    for step in start + 1..=total {
        let t0 = Instant::now();
        let (v, a, norm) = session.train_step(step)?;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        writeln!(log, "{step},{v},{a},{norm},{ms:.3}")?;
        log.flush()?;
        if step % session.cfg.run.checkpoint_every == 0 || step == total {
            save_checkpoint(&ckpt_path, &session.state)?;
        }
    }
    Ok(TrainOutcome { checkpoint: ckpt_path, log: log_path, final_step: total })
}
