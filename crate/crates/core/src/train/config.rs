//! Run configuration, read from TOML.
//!
//! ```toml
//! [model]                 # defaults: the toy model
//! n_layers = 2
//! d_model = 128
//!
//! [model.quant.fc1]       # also qkv, attn_out, fc2, lm_head
//! weight = { bits = 4, granularity = "channel:0" }
//! activation = { bits = 8, granularity = "token", mode = "symmetric" }
//! grad_out = { bits = 8, granularity = "token" }
//!
//! [optimizer]
//! lr = 6e-4
//! m_quant = { bits = 4, granularity = "channel:0" }
//!
//! [training]
//! total_steps = 2000
//! global_batch = 4
//! micro_batch = 4
//! grad_clip_norm = 1.0    # 0 disables clipping
//!
//! [data]
//! corpus = "corpus.bin"
//! ```
//!
//! Every key not listed here is reported as unknown.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::AdamHyper;
use crate::quant::{Granularity, QuantConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m_quant: Option<QuantConfig>,
    pub v_quant: Option<QuantConfig>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let h = AdamHyper::default();
        Self {
            lr: h.lr,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            weight_decay: h.weight_decay,
            m_quant: None,
            v_quant: None,
        }
    }
}

impl OptimizerConfig {
    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            t: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub total_steps: u64,
    /// Defaults to 2% of `total_steps`.
    pub warmup_steps: Option<u64>,
    /// Defaults to the peak rate divided by 60.
    pub min_lr: Option<f64>,
    /// Sequences per optimizer step.
    pub global_batch: usize,
    /// Sequences per forward/backward pass.
    pub micro_batch: usize,
    /// Global gradient-norm clip; 0 turns clipping off.
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub eval_interval: u64,
    /// Validation windows of `context_length + 1` tokens per evaluation.
    pub eval_windows: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_interval: u64,
    /// Record per-layer grad-out quantization error norms.
    pub log_quant_errors: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            warmup_steps: None,
            min_lr: None,
            global_batch: 4,
            micro_batch: 4,
            grad_clip_norm: 1.0,
            seed: 0,
            eval_interval: 100,
            eval_windows: 16,
            checkpoint_interval: 0,
            log_quant_errors: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// A prepared corpus cache.
    pub corpus: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
}

impl TrainRunConfig {
    /// Parses TOML; unknown keys are collected and reported together.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text)
            .map_err(|e| Error::InvalidConfig(format!("TOML syntax: {e}")))?;
        let mut unknown = Vec::new();
        let cfg: Self = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if !unknown.is_empty() {
            return Err(Error::InvalidConfig(format!("unknown keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// A copy with every optional default filled in.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.training.warmup_steps = Some(self.warmup_steps());
        out.training.min_lr = Some(self.min_lr());
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn warmup_steps(&self) -> u64 {
        self.training
            .warmup_steps
            .unwrap_or_else(|| (self.training.total_steps as f64 * 0.02).round() as u64)
    }

    pub fn min_lr(&self) -> f64 {
        self.training.min_lr.unwrap_or(self.optimizer.lr / 60.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.model.validate()?;
        self.optimizer.hyper().validate()?;
        for (name, cfg) in [("m_quant", self.optimizer.m_quant), ("v_quant", self.optimizer.v_quant)] {
            if let Some(cfg) = cfg {
                cfg.range()?;
                match cfg.granularity {
                    Granularity::PerToken => {
                        return bad(format!("optimizer.{name} must be tensor or channel granularity"))
                    }
                    Granularity::PerChannel { axis } if axis > 1 => {
                        return bad(format!("optimizer.{name} channel axis must be 0 or 1"))
                    }
                    _ => {}
                }
            }
        }
        let t = &self.training;
        if t.total_steps == 0 {
            return bad("training.total_steps must be positive".into());
        }
        if self.warmup_steps() >= t.total_steps {
            return bad(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps(),
                t.total_steps
            ));
        }
        if t.micro_batch == 0 || !t.global_batch.is_multiple_of(t.micro_batch) {
            return bad(format!(
                "micro_batch {} must divide global_batch {}",
                t.micro_batch, t.global_batch
            ));
        }
        if !(t.grad_clip_norm >= 0.0 && t.grad_clip_norm.is_finite()) {
            return bad("training.grad_clip_norm must be finite and non-negative".into());
        }
        let min_lr = self.min_lr();
        if !(min_lr >= 0.0 && min_lr <= self.optimizer.lr) {
            return bad(format!("min_lr {min_lr} must lie in [0, lr]"));
        }
        if t.eval_interval == 0 {
            return bad("training.eval_interval must be positive".into());
        }
        Ok(())
    }
}

/// Learning rate after `step` updates: linear warmup from 0 to the peak, then
/// a half cosine down to `min_lr` at `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainRunConfig) -> f64 {
    let peak = cfg.optimizer.lr;
    let min = cfg.min_lr();
    let warmup = cfg.warmup_steps();
    let total = cfg.training.total_steps;
    let step = step.min(total);
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    min + 0.5 * (peak - min) * (1.0 + (std::f64::consts::PI * progress).cos())
}
