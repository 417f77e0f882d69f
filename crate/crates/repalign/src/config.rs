//! Run configuration: a JSON document whose sections mirror the standard
//! hyperparameter table layout (architecture / repa / optimization /
//! interpolant) plus dataset and run bookkeeping. The serialized bytes are
//! embedded verbatim in checkpoints together with an FNV-1a digest so
//! evaluation can detect config drift.

use anyhow::{bail, Context, Result};
use repalign_core::model::DenoiserConfig;
use repalign_core::process::Interpolant;
use repalign_core::repa::{Objective, RepaConfig};
use repalign_core::sampling::WtRule;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ArchitectureSection {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for ArchitectureSection {
    fn default() -> Self {
        ArchitectureSection {
            image_size: 16,
            channels: 1,
            patch_size: 4,
            num_layers: 4,
            hidden_dim: 64,
            num_heads: 4,
            mlp_ratio: 4,
            num_classes: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RepaSection {
    pub lambda: f64,
    pub alignment_depth: usize,
    /// "cosine" or "nt-xent".
    pub similarity: String,
    pub temperature: f64,
    /// "oracle", "descriptor", or "file:<path>".
    pub encoder: String,
    /// Projection head hidden width; 0 uses the model hidden width.
    pub proj_hidden: usize,
}

impl Default for RepaSection {
    fn default() -> Self {
        RepaSection {
            lambda: 0.5,
            alignment_depth: 2,
            similarity: "cosine".into(),
            temperature: 0.1,
            encoder: "oracle".into(),
            proj_hidden: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OptimizationSection {
    pub training_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    /// Global-norm clip threshold; 0 disables clipping.
    pub grad_clip: f64,
    pub ema_decay: f64,
    pub label_dropout: f64,
}

impl Default for OptimizationSection {
    fn default() -> Self {
        OptimizationSection {
            training_steps: 5000,
            batch_size: 128,
            lr: 1e-4,
            betas: [0.9, 0.999],
            weight_decay: 0.0,
            grad_clip: 0.0,
            ema_decay: 0.999,
            label_dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct InterpolantSection {
    /// "linear", "vp", or "ddpm".
    pub kind: String,
    /// "sigma" or a positive number (constant diffusion scale).
    pub wt: serde_json::Value,
    /// Chain length for the ddpm kind.
    pub ddpm_steps: usize,
}

impl Default for InterpolantSection {
    fn default() -> Self {
        InterpolantSection { kind: "linear".into(), wt: "sigma".into(), ddpm_steps: 1000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DatasetSection {
    /// "shapes" or "idx".
    pub kind: String,
    pub train_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub images_path: String,
    #[serde(default)]
    pub labels_path: String,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            kind: "shapes".into(),
            train_size: 5000,
            seed: 0,
            images_path: String::new(),
            labels_path: String::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunSection {
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_path: String,
    pub checkpoint_path: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            checkpoint_every: 1000,
            log_path: "train.csv".into(),
            checkpoint_path: "model.rpac".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct RunConfig {
    pub architecture: ArchitectureSection,
    pub repa: RepaSection,
    pub optimization: OptimizationSection,
    pub interpolant: InterpolantSection,
    pub dataset: DatasetSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).context("parsing run config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser_config().validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        self.repa_config()?.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        self.interpolant()?;
        self.wt_rule()?;
        match self.dataset.kind.as_str() {
            "shapes" => {
                if self.dataset.train_size == 0 {
                    bail!("dataset.train_size must be positive");
                }
            }
            "idx" => {
                if self.dataset.images_path.is_empty() || self.dataset.labels_path.is_empty() {
                    bail!("idx dataset needs images_path and labels_path");
                }
            }
            other => bail!("unknown dataset kind {other:?}"),
        }
        if !(0.0..=1.0).contains(&self.optimization.label_dropout) {
            bail!("label_dropout must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.optimization.ema_decay) {
            bail!("ema_decay must lie in [0, 1)");
        }
        if self.optimization.batch_size == 0 || self.optimization.training_steps == 0 {
            bail!("batch_size and training_steps must be positive");
        }
        if !matches!(self.repa.encoder.as_str(), "oracle" | "descriptor")
            && !self.repa.encoder.starts_with("file:")
        {
            bail!("unknown encoder {:?}", self.repa.encoder);
        }
        Ok(())
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        let a = &self.architecture;
        DenoiserConfig {
            img: a.image_size,
            channels: a.channels,
            patch: a.patch_size,
            depth: a.num_layers,
            dim: a.hidden_dim,
            heads: a.num_heads,
            mlp_ratio: a.mlp_ratio,
            num_classes: a.num_classes,
            time_freq_dim: 64,
        }
    }

    pub fn repa_config(&self) -> Result<RepaConfig> {
        let objective = match self.repa.similarity.as_str() {
            "cosine" => Objective::Cosine,
            "nt-xent" => Objective::NtXent,
            other => bail!("unknown similarity {other:?}"),
        };
        Ok(RepaConfig {
            lambda: self.repa.lambda as f32,
            objective,
            temperature: self.repa.temperature as f32,
            depth: self.repa.alignment_depth,
            proj_hidden: self.repa.proj_hidden,
        })
    }

    pub fn interpolant(&self) -> Result<Interpolant> {
        match self.interpolant.kind.as_str() {
            "linear" => Ok(Interpolant::Linear),
            "vp" => Ok(Interpolant::Vp),
            "ddpm" => Ok(Interpolant::DdpmDiscrete(
                repalign_core::process::ddpm_schedule(self.interpolant.ddpm_steps, 1e-4, 0.02)
                    .map_err(|e| anyhow::anyhow!("{e}"))?,
            )),
            other => bail!("unknown interpolant kind {other:?}"),
        }
    }

    pub fn wt_rule(&self) -> Result<WtRule> {
        match &self.interpolant.wt {
            serde_json::Value::String(s) if s == "sigma" => Ok(WtRule::Sigma),
            serde_json::Value::Number(n) => {
                let v = n.as_f64().unwrap_or(0.0);
                if v <= 0.0 {
                    bail!("constant wt must be positive");
                }
                Ok(WtRule::Const(v))
            }
            other => bail!("wt must be \"sigma\" or a positive number, got {other}"),
        }
    }

    /// FNV-1a over the serialized document; stored in checkpoints so
    /// evaluation configs can be checked against the training config.
    pub fn digest(&self) -> u64 {
        fnv1a(self.to_json().as_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_digest_is_stable() {
        let cfg = RunConfig::default();
        let text = cfg.to_json();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.digest(), back.digest());
        let mut other = cfg.clone();
        other.repa.lambda = 0.0;
        assert_ne!(cfg.digest(), other.digest());
    }

    #[test]
    fn wt_accepts_sigma_or_number() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.wt_rule().unwrap(), WtRule::Sigma);
        cfg.interpolant.wt = serde_json::json!(0.7);
        assert_eq!(cfg.wt_rule().unwrap(), WtRule::Const(0.7));
        cfg.interpolant.wt = serde_json::json!(-1.0);
        assert!(cfg.wt_rule().is_err());
    }

    #[test]
    fn validation_rejects_bad_sections() {
        let mut cfg = RunConfig::default();
        cfg.repa.similarity = "dot".into();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.dataset.kind = "idx".into();
        assert!(cfg.validate().is_err(), "idx without paths");
        let mut cfg = RunConfig::default();
        cfg.optimization.label_dropout = 1.5;
        assert!(cfg.validate().is_err());
    }
}
