//! Deterministic training loop.
//!
//! Update `s` (counting from 1) uses learning rate `lr_at(s)` and the global
//! batch `corpus.batch(s, data_seed, global_batch, T)`, split into
//! micro-batches whose gradients are averaged. Nothing else draws random
//! numbers, so a run is a pure function of its config and corpus, and
//! resuming from a checkpoint reproduces the uninterrupted run exactly.
//!
//! # Output directory
//!
//! ```text
//! manifest.json         resolved config, artifact paths, digests (written first)
//! metrics.jsonl         one MetricsRecord per update
//! ckpt-<step>.ckpt      periodic checkpoints
//! final.ckpt            state after the last update
//! summary.json          RunSummary
//! divergence.json       DivergenceReport, only when the run diverged
//! ```
//!
//! # Metrics record (version 1)
//!
//! ```text
//! v                  1
//! step               updates completed
//! lr                 learning rate used by this update
//! train_loss         mean loss over the global batch
//! val_loss           validation loss after the update (eval steps only)
//! grad_norm          global gradient norm before clipping
//! quant_error_norms  per-layer ||dY - Q(dY)||_2 (grad-out quantization only)
//! zero_bin_fraction  zero-bin share of the stored v (or m when only m is quantized)
//! clamp_count        negative dequantized v clamped (moment quantization only)
//! overshoot_count    |m_hat|/sqrt(v_hat) above the exact-Adam bound (idem)
//! update_ratio_max   largest |m_hat|/(sqrt(v_hat)+eps)
//! ```

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::TokenizedCorpus;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, GptModel, TokenBlock};
use crate::optim::{adam_step, AdamHyper, MomentStore};
use crate::qlinear::GradOutErrors;
use crate::tensor::Tensor;

pub use config::{lr_at, DataConfig, OptimizerConfig, TrainRunConfig, TrainingConfig};

pub const METRICS_VERSION: u32 = 1;
const DATA_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub step: u64,
    #[serde(with = "lossless_f64")]
    pub loss: f64,
    #[serde(with = "lossless_f64")]
    pub lr: f64,
    #[serde(with = "lossless_f64")]
    pub grad_norm: f64,
    pub reason: String,
}

/// Writes NaN and infinities as the strings `"NaN"`, `"inf"`, `"-inf"`.
mod lossless_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("NaN")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "NaN" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                _ => Err(serde::de::Error::custom(format!("expected a number, got {t:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub v: u32,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub quant_error_norms: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_bin_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamp_count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overshoot_count: Option<u64>,
    pub update_ratio_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps_completed: u64,
    pub initial_val_loss: f64,
    pub final_val_loss: Option<f64>,
    pub max_zero_bin_fraction: Option<f64>,
    pub total_clamp_count: u64,
    pub total_overshoot_count: u64,
    pub divergence: Option<DivergenceReport>,
}

impl RunSummary {
    /// `Err(Error::Divergence)` when the run diverged.
    pub fn into_result(self) -> Result<Self> {
        match self.divergence {
            Some(report) => Err(Error::Divergence(Box::new(report))),
            None => Ok(self),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainRunConfig,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub config_sha256: String,
    pub corpus_sha256: String,
    pub code_version: String,
}

/// Trainer counters carried in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResumeState {
    step: u64,
    initial_val_loss: f64,
    max_zero_bin_fraction: Option<f64>,
    total_clamp_count: u64,
    total_overshoot_count: u64,
}

/// Mean loss and averaged gradients of a `[B, T+1]` block processed in
/// micro-batches of `micro` rows.
pub fn batch_gradients(
    model: &GptModel,
    block: &TokenBlock,
    micro: usize,
    opts: &ForwardOptions,
) -> Result<(f64, Vec<Tensor>)> {
    if micro == 0 || !block.batch.is_multiple_of(micro) {
        return Err(Error::InvalidConfig(format!(
            "micro batch {micro} does not divide batch {}",
            block.batch
        )));
    }
    let chunks = block.batch / micro;
    let mut loss_sum = 0.0;
    let mut total: Option<Vec<Tensor>> = None;
    for c in 0..chunks {
        let ids = block.ids[c * micro * block.cols..(c + 1) * micro * block.cols].to_vec();
        let part = model.loss_and_grads(&TokenBlock::new(micro, block.cols, ids)?, opts)?;
        if !part.loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {}", part.loss)));
        }
        loss_sum += part.loss;
        match &mut total {
            None => total = Some(part.grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&part.grads) {
                    a.add_assign(g)?;
                }
            }
        }
    }
    let mut grads = total.unwrap_or_default();
    if chunks > 1 {
        let inv = 1.0 / chunks as f64;
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|x| *x *= inv);
        }
    }
    Ok((loss_sum / chunks as f64, grads))
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Mean validation loss over at most `windows` windows of `T + 1` tokens.
pub fn evaluate(model: &GptModel, corpus: &TokenizedCorpus, windows: usize, chunk: usize) -> Result<f64> {
    let seq = model.config().context_length;
    let wins = corpus.val_windows(seq, windows);
    if wins.is_empty() {
        return Err(Error::Data(format!(
            "validation split has {} tokens, need at least {}",
            corpus.val().len(),
            seq + 1
        )));
    }
    let mut sum = 0.0;
    for group in wins.chunks(chunk.max(1)) {
        let ids: Vec<u32> = group.iter().flat_map(|w| w.iter().copied()).collect();
        let block = TokenBlock::new(group.len(), seq + 1, ids)?;
        sum += model.loss(&block)? * group.len() as f64;
    }
    Ok(sum / wins.len() as f64)
}

/// A training run advanced one update at a time.
pub struct Trainer<'a> {
    cfg: TrainRunConfig,
    corpus: &'a TokenizedCorpus,
    model: GptModel,
    store: MomentStore,
    hyper: AdamHyper,
    state: ResumeState,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainRunConfig, corpus: &'a TokenizedCorpus) -> Result<Self> {
        cfg.validate()?;
        check_corpus(cfg, corpus)?;
        let model = GptModel::new(cfg.model.clone(), cfg.training.seed)?;
        let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.value.shape().to_vec()).collect();
        let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let store = MomentStore::new(&refs, cfg.optimizer.m_quant, cfg.optimizer.v_quant)?;
        let initial_val_loss = evaluate(&model, corpus, cfg.training.eval_windows, cfg.training.micro_batch)?;
        Ok(Self {
            cfg: cfg.clone(),
            corpus,
            model,
            store,
            hyper: cfg.optimizer.hyper(),
            state: ResumeState {
                step: 0,
                initial_val_loss,
                max_zero_bin_fraction: None,
                total_clamp_count: 0,
                total_overshoot_count: 0,
            },
        })
    }

    pub fn from_checkpoint(
        cfg: &TrainRunConfig,
        corpus: &'a TokenizedCorpus,
        ckpt: Checkpoint,
    ) -> Result<Self> {
        cfg.validate()?;
        check_corpus(cfg, corpus)?;
        if ckpt.model.config() != &cfg.model {
            return Err(Error::InvalidConfig("checkpoint model config differs from the run config".into()));
        }
        let (hyper, store) = ckpt
            .optimizer
            .ok_or_else(|| Error::State("checkpoint has no optimizer state".into()))?;
        if store.quant_config(crate::optim::MomentKind::M) != cfg.optimizer.m_quant
            || store.quant_config(crate::optim::MomentKind::V) != cfg.optimizer.v_quant
        {
            return Err(Error::InvalidConfig(
                "checkpoint moment quantization differs from the run config".into(),
            ));
        }
        let state: ResumeState = serde_json::from_value(ckpt.extra)
            .map_err(|e| Error::State(format!("checkpoint trainer state: {e}")))?;
        if state.step > cfg.training.total_steps || hyper.t != state.step {
            return Err(Error::State(format!(
                "checkpoint at step {} (optimizer t={}) does not fit a {}-step run",
                state.step, hyper.t, cfg.training.total_steps
            )));
        }
        let expected = cfg.optimizer.hyper();
        if (hyper.beta1, hyper.beta2, hyper.eps, hyper.weight_decay)
            != (expected.beta1, expected.beta2, expected.eps, expected.weight_decay)
        {
            return Err(Error::InvalidConfig("checkpoint optimizer settings differ from the run config".into()));
        }
        Ok(Self {
            cfg: cfg.clone(),
            corpus,
            model: ckpt.model,
            store,
            hyper,
            state,
        })
    }

    pub fn step(&self) -> u64 {
        self.state.step
    }

    pub fn model(&self) -> &GptModel {
        &self.model
    }

    pub fn store(&self) -> &MomentStore {
        &self.store
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.cfg.training.total_steps
    }

    pub fn initial_val_loss(&self) -> f64 {
        self.state.initial_val_loss
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some((self.hyper, self.store.clone())),
            extra: serde_json::to_value(&self.state).expect("state serializes"),
        }
    }

    pub fn summary(&self, final_val_loss: Option<f64>, divergence: Option<DivergenceReport>) -> RunSummary {
        RunSummary {
            steps_completed: self.state.step,
            initial_val_loss: self.state.initial_val_loss,
            final_val_loss,
            max_zero_bin_fraction: self.state.max_zero_bin_fraction,
            total_clamp_count: self.state.total_clamp_count,
            total_overshoot_count: self.state.total_overshoot_count,
            divergence,
        }
    }

    /// Performs the next update. A non-finite loss or gradient yields
    /// `Err(Error::Divergence)` and leaves the state untouched.
    pub fn advance(&mut self) -> Result<MetricsRecord> {
        let t = &self.cfg.training;
        if self.is_done() {
            return Err(Error::State("run already complete".into()));
        }
        let step = self.state.step + 1;
        let lr = lr_at(step, &self.cfg);
        let seq = self.cfg.model.context_length;
        let block = self
            .corpus
            .batch(step, t.seed ^ DATA_SEED_SALT, t.global_batch, seq)?;
        let errors = GradOutErrors::new();
        let opts = ForwardOptions {
            grad_out_errors: t.log_quant_errors.then(|| errors.clone()),
            ..Default::default()
        };
        let diverged = |loss: f64, grad_norm: f64, reason: String| {
            Error::Divergence(Box::new(DivergenceReport {
                step,
                loss,
                lr,
                grad_norm,
                reason,
            }))
        };

        let (loss, mut grads) = match batch_gradients(&self.model, &block, t.micro_batch, &opts) {
            Ok(r) => r,
            Err(Error::NonFinite(msg)) => return Err(diverged(f64::NAN, f64::NAN, msg)),
            Err(e) => return Err(e),
        };
        let grad_norm = global_norm(&grads);
        if !grad_norm.is_finite() {
            return Err(diverged(loss, grad_norm, "non-finite gradient norm".into()));
        }
        if t.grad_clip_norm > 0.0 && grad_norm > t.grad_clip_norm {
            let scale = t.grad_clip_norm / grad_norm;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
        }

        let decay: Vec<bool> = self.model.params().iter().map(|p| p.decay).collect();
        let mut values: Vec<Tensor> = self.model.params().iter().map(|p| p.value.clone()).collect();
        let mut hyper = self.hyper;
        hyper.lr = lr;
        let mut store = self.store.clone();
        let stats = adam_step(&mut values, &decay, &grads, &mut store, &mut hyper)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(diverged(loss, grad_norm, "non-finite parameters after update".into()));
        }
        for (p, v) in self.model.params_mut().iter_mut().zip(values) {
            p.value = v;
        }
        self.store = store;
        self.hyper = hyper;
        self.state.step = step;

        let quantized_moments = self.cfg.optimizer.m_quant.is_some() || self.cfg.optimizer.v_quant.is_some();
        let zero_bin = stats.v_zero_bin_fraction.or(stats.m_zero_bin_fraction);
        if let Some(z) = zero_bin {
            let best = self.state.max_zero_bin_fraction.map_or(z, |m| m.max(z));
            self.state.max_zero_bin_fraction = Some(best);
        }
        self.state.total_clamp_count += stats.clamp_count;
        self.state.total_overshoot_count += stats.overshoot_count;

        let val_loss = if step.is_multiple_of(t.eval_interval) || step == t.total_steps {
            Some(evaluate(&self.model, self.corpus, t.eval_windows, t.micro_batch)?)
        } else {
            None
        };
        Ok(MetricsRecord {
            v: METRICS_VERSION,
            step,
            lr,
            train_loss: loss,
            val_loss,
            grad_norm,
            quant_error_norms: errors.norms(),
            zero_bin_fraction: zero_bin,
            clamp_count: quantized_moments.then_some(stats.clamp_count),
            overshoot_count: quantized_moments.then_some(stats.overshoot_count),
            update_ratio_max: stats.max_update_ratio,
        })
    }
}

fn check_corpus(cfg: &TrainRunConfig, corpus: &TokenizedCorpus) -> Result<()> {
    if corpus.vocab_size() > cfg.model.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "corpus vocabulary {} exceeds model vocabulary {}",
            corpus.vocab_size(),
            cfg.model.vocab_size
        )));
    }
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn manifest(cfg: &TrainRunConfig, corpus: &TokenizedCorpus, out_dir: &Path) -> RunManifest {
    let resolved = cfg.resolved();
    let artifacts = [
        ("metrics", "metrics.jsonl"),
        ("final_checkpoint", "final.ckpt"),
        ("summary", "summary.json"),
        ("divergence", "divergence.json"),
        ("checkpoint_dir", ""),
    ]
    .into_iter()
    .map(|(k, f)| (k.to_string(), out_dir.join(f)))
    .collect();
    RunManifest {
        config_sha256: sha256_hex(resolved.to_toml().as_bytes()),
        config: resolved,
        artifacts,
        corpus_sha256: corpus.digest_hex(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
    }
}

/// Reads a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Runs (or resumes) a full training run, writing every artifact into
/// `out_dir`. Divergence is reported in the returned summary and in
/// `divergence.json`; use [`RunSummary::into_result`] to turn it into an error.
pub fn run(
    cfg: &TrainRunConfig,
    corpus: &TokenizedCorpus,
    out_dir: &Path,
    resume: Option<&Path>,
    progress: &mut dyn FnMut(&MetricsRecord),
) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_json(&out_dir.join("manifest.json"), &manifest(cfg, corpus, out_dir))?;

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut trainer = match resume {
        None => Trainer::new(cfg, corpus)?,
        Some(path) => Trainer::from_checkpoint(cfg, corpus, Checkpoint::load(path)?)?,
    };
    let mut kept = String::new();
    if trainer.step() > 0 && metrics_path.exists() {
        let text = fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        let records = read_metrics(&metrics_path)?;
        for (line, rec) in text.lines().filter(|l| !l.trim().is_empty()).zip(records) {
            if rec.step <= trainer.step() {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    let mut log = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    log.write_all(kept.as_bytes()).map_err(|e| Error::io(&metrics_path, e))?;
    let divergence_path = out_dir.join("divergence.json");
    if divergence_path.exists() {
        fs::remove_file(&divergence_path).map_err(|e| Error::io(&divergence_path, e))?;
    }

    let mut last_val = None;
    let interval = cfg.training.checkpoint_interval;
    while !trainer.is_done() {
        let rec = match trainer.advance() {
            Ok(rec) => rec,
            Err(Error::Divergence(report)) => {
                write_json(&divergence_path, &*report)?;
                let summary = trainer.summary(last_val, Some(*report));
                write_json(&out_dir.join("summary.json"), &summary)?;
                return Ok(summary);
            }
            Err(e) => return Err(e),
        };
        let mut line = serde_json::to_string(&rec).expect("record serializes");
        line.push('\n');
        log.write_all(line.as_bytes()).map_err(|e| Error::io(&metrics_path, e))?;
        if rec.val_loss.is_some() {
            last_val = rec.val_loss;
        }
        progress(&rec);
        if interval > 0 && rec.step % interval == 0 && !trainer.is_done() {
            let path = out_dir.join(format!("ckpt-{:06}.ckpt", rec.step));
            trainer.checkpoint().save(&path)?;
        }
    }
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;
    trainer.checkpoint().save(&out_dir.join("final.ckpt"))?;
    if last_val.is_none() {
        last_val = Some(evaluate(
            trainer.model(),
            corpus,
            cfg.training.eval_windows,
            cfg.training.micro_batch,
        )?);
    }
    let summary = trainer.summary(last_val, None);
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}
