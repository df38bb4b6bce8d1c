//! Analytic training-memory and FLOP estimates.
//!
//! With batch `B`, sequence `T`, width `d`, MLP width `f`, heads `H`,
//! layers `L`, vocabulary `V`, `P` parameters and `b` bytes per element:
//!
//! ```text
//! params      = P b
//! grads       = P b
//! optimizer   = sum over states of P * (bits/8 if quantized else b)
//! activations = b [ L (8BTd + 2BTf + H B T^2 + 4BT) + 2BTd + 2BT ]
//! logits      = B T V b
//! ```
//!
//! Per layer the saved activations are the LayerNorm inputs (2), the qkv
//! input, q, k and v (4), the attention output and the fc1 input (2), the
//! fc1 output and GELU output (2 of width `f`), the attention probabilities
//! (`H T^2` per sequence) and two statistics per token for each LayerNorm.
//! The final LayerNorm keeps its input, the head input and its statistics.
//!
//! Peak scenarios:
//!
//! ```text
//! start of backward = params + optimizer + activations + logits
//! end of backward   = params + optimizer + grads + first-layer activations
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    AdamW,
    SgdMomentum,
    Sgd,
}

impl OptimizerKind {
    pub fn states(self) -> usize {
        match self {
            Self::AdamW => 2,
            Self::SgdMomentum => 1,
            Self::Sgd => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeakScenario {
    StartOfBackward,
    EndOfBackward,
}

/// Byte counts per component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub params: f64,
    pub grads: f64,
    pub optimizer: f64,
    pub activations: f64,
    pub logits: f64,
    pub start_of_backward: f64,
    pub end_of_backward: f64,
    pub peak: f64,
    pub peak_scenario: PeakScenario,
}

impl MemoryBreakdown {
    /// `(name, bytes)` for the five components.
    pub fn components(&self) -> [(&'static str, f64); 5] {
        [
            ("params", self.params),
            ("grads", self.grads),
            ("optimizer", self.optimizer),
            ("activations", self.activations),
            ("logits", self.logits),
        ]
    }

    pub fn largest_component(&self) -> &'static str {
        self.components()
            .into_iter()
            .fold(("", f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best })
            .0
    }
}

/// Memory estimate; `moment_bits[i]` is the stored width of optimizer state
/// `i` (first moment, then second), `None` meaning full precision.
pub fn memory_estimate(
    cfg: &ModelConfig,
    batch: usize,
    seq: usize,
    bytes_per_element: f64,
    optimizer: OptimizerKind,
    moment_bits: [Option<u8>; 2],
) -> Result<MemoryBreakdown> {
    cfg.validate()?;
    if seq == 0 || !(bytes_per_element > 0.0) {
        return Err(Error::InvalidConfig(
            "sequence length and bytes per element must be positive".into(),
        ));
    }
    let b = bytes_per_element;
    let p = cfg.param_count() as f64;
    let (bt, d, f, h) = (
        (batch * seq) as f64,
        cfg.d_model as f64,
        cfg.d_ff as f64,
        cfg.n_heads as f64,
    );
    let t = seq as f64;
    let optimizer_bytes: f64 = moment_bits[..optimizer.states()]
        .iter()
        .map(|bits| bits.map_or(p * b, |k| p * k as f64 / 8.0))
        .sum();
    let layer = b * (8.0 * bt * d + 2.0 * bt * f + h * bt * t + 4.0 * bt);
    let activations = cfg.n_layers as f64 * layer + b * (2.0 * bt * d + 2.0 * bt);
    let logits = bt * cfg.vocab_size as f64 * b;
    let params = p * b;
    let grads = p * b;
    let start = params + optimizer_bytes + activations + logits;
    let end = params + optimizer_bytes + grads + layer;
    let (peak, peak_scenario) = if start >= end {
        (start, PeakScenario::StartOfBackward)
    } else {
        (end, PeakScenario::EndOfBackward)
    };
    Ok(MemoryBreakdown {
        params,
        grads,
        optimizer: optimizer_bytes,
        activations,
        logits,
        start_of_backward: start,
        end_of_backward: end,
        peak,
        peak_scenario,
    })
}

/// Share of forward+backward FLOPs spent in the block linear layers, against
/// the attention score and value products. The head and embeddings are left
/// out; with `f = 4d` this is `6d / (6d + T)`.
pub fn linear_flop_fraction(cfg: &ModelConfig, seq: usize) -> f64 {
    let (d, f, t) = (cfg.d_model as f64, cfg.d_ff as f64, seq as f64);
    let linear = 8.0 * d * d + 4.0 * d * f;
    let attention = 4.0 * t * d;
    linear / (linear + attention)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fraction_closed_form() {
        let c = ModelConfig::gpt2_small();
        for t in [1, 128, 1024, 8192] {
            let expected = 6.0 * 768.0 / (6.0 * 768.0 + t as f64);
            assert!((linear_flop_fraction(&c, t) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn optimizer_bits_shrink_state() {
        let c = ModelConfig::toy();
        let full = memory_estimate(&c, 4, 128, 4.0, OptimizerKind::AdamW, [None, None]).unwrap();
        let q = memory_estimate(&c, 4, 128, 4.0, OptimizerKind::AdamW, [Some(4), Some(8)]).unwrap();
        assert_eq!(full.optimizer, 2.0 * full.params);
        assert_eq!(q.optimizer, full.params / 4.0 * 1.5);
        let sgd = memory_estimate(&c, 4, 128, 4.0, OptimizerKind::Sgd, [Some(4), None]).unwrap();
        assert_eq!(sgd.optimizer, 0.0);
        assert_eq!(full.peak, full.start_of_backward.max(full.end_of_backward));
        assert!(memory_estimate(&c, 4, 0, 4.0, OptimizerKind::Sgd, [None, None]).is_err());
        let empty = memory_estimate(&c, 0, 128, 4.0, OptimizerKind::AdamW, [None, None]).unwrap();
        assert_eq!((empty.activations, empty.logits), (0.0, 0.0));
    }

    #[test]
    fn logits_example() {
        let c = ModelConfig::gpt2_small();
        let m = memory_estimate(&c, 4, 1024, 2.0, OptimizerKind::AdamW, [None, None]).unwrap();
        assert_eq!(m.logits, 4.0 * 1024.0 * 50257.0 * 2.0);
        assert!((m.logits / 1e6 - 411.7).abs() < 0.1);
    }
}
