//! AdamW with optionally quantized first and second moments.
//!
//! Each step dequantizes the stored moments, forms
//!
//! ```text
//! m' = b1*m + (1-b1)*g
//! v' = b2*v + (1-b2)*g*g
//! theta <- theta - lr*((m'/(1-b1^t)) / (sqrt(v'/(1-b2^t)) + eps)) - lr*wd*theta
//! ```
//!
//! and stores `Q(m')` and `Q(v')` for the next step. Moments of rank-1
//! parameters (biases, norm gains) fall back to per-tensor grouping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{self, Granularity, QuantConfig, QuantizedTensor};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps taken so far; `adam_step` increments it before use.
    pub t: u64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 6e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            t: 0,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps {} must be positive", self.eps));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be finite and non-negative", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be finite and non-negative", self.weight_decay));
        }
        Ok(())
    }

    /// Largest `|m_hat| / sqrt(v_hat)` exact Adam can produce at step `t`
    /// (Cauchy-Schwarz over the gradient history).
    pub fn ratio_bound(&self, t: u64) -> f64 {
        let (b1, b2) = (self.beta1, self.beta2);
        let t = t.max(1);
        let r = b1 * b1 / b2;
        let series = if (r - 1.0).abs() < 1e-12 {
            t as f64
        } else {
            (1.0 - r.powf(t as f64)) / (1.0 - r)
        };
        (1.0 - b1) / (1.0 - b1.powf(t as f64)) * (1.0 - b2.powf(t as f64)).sqrt()
            / (1.0 - b2).sqrt()
            * series.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MomentKind {
    M,
    V,
}

/// One stored moment tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Moment {
    Real(Tensor),
    Quantized(QuantizedTensor),
}

impl Moment {
    pub fn dequantized(&self) -> Tensor {
        match self {
            Moment::Real(t) => t.clone(),
            Moment::Quantized(q) => quant::dequantize(q),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Moment::Real(t) => t.shape(),
            Moment::Quantized(q) => q.source_shape(),
        }
    }
}

/// The grouping actually applied to a moment of the given shape.
pub fn moment_config(cfg: &QuantConfig, shape: &[usize]) -> QuantConfig {
    let granularity = match cfg.granularity {
        Granularity::PerChannel { axis } if shape.len() < 2 || axis >= shape.len() => {
            Granularity::PerTensor
        }
        g => g,
    };
    QuantConfig { granularity, ..*cfg }
}

/// Counters gathered by one `adam_step`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// Negative dequantized second moments clamped to zero.
    pub clamp_count: u64,
    /// Elements whose `|m_hat| / sqrt(v_hat)` exceeds the exact-Adam bound.
    pub overshoot_count: u64,
    /// Fraction of stored `v` entries in the zero bin, when `v` is quantized.
    pub v_zero_bin_fraction: Option<f64>,
    /// Fraction of stored `m` entries in the zero bin, when `m` is quantized.
    pub m_zero_bin_fraction: Option<f64>,
    /// Largest `|m_hat| / (sqrt(v_hat) + eps)` across all elements.
    pub max_update_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentStore {
    m: Vec<Moment>,
    v: Vec<Moment>,
    m_quant: Option<QuantConfig>,
    v_quant: Option<QuantConfig>,
}

impl MomentStore {
    /// Zero moments for parameters of the given shapes.
    pub fn new(
        shapes: &[&[usize]],
        m_quant: Option<QuantConfig>,
        v_quant: Option<QuantConfig>,
    ) -> Result<Self> {
        for cfg in m_quant.iter().chain(v_quant.iter()) {
            if cfg.granularity == Granularity::PerToken {
                return Err(Error::InvalidConfig(
                    "moment quantization supports tensor or channel granularity".into(),
                ));
            }
            for shape in shapes {
                moment_config(cfg, shape).validate_for(shape)?;
            }
        }
        let zeros = || shapes.iter().map(|s| Moment::Real(Tensor::zeros(s))).collect();
        Ok(Self {
            m: zeros(),
            v: zeros(),
            m_quant,
            v_quant,
        })
    }

    /// Restores a store from saved moments.
    pub fn from_parts(
        m: Vec<Moment>,
        v: Vec<Moment>,
        m_quant: Option<QuantConfig>,
        v_quant: Option<QuantConfig>,
    ) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Shape("first and second moments disagree".into()));
        }
        Ok(Self {
            m,
            v,
            m_quant,
            v_quant,
        })
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn moments(&self, which: MomentKind) -> &[Moment] {
        match which {
            MomentKind::M => &self.m,
            MomentKind::V => &self.v,
        }
    }

    pub fn quant_config(&self, which: MomentKind) -> Option<QuantConfig> {
        match which {
            MomentKind::M => self.m_quant,
            MomentKind::V => self.v_quant,
        }
    }

    /// Sets the quantizer for one moment and requantizes its current values.
    pub fn quantize_state(&mut self, which: MomentKind, cfg: QuantConfig) -> Result<()> {
        let slot = match which {
            MomentKind::M => &mut self.m,
            MomentKind::V => &mut self.v,
        };
        let mut next = Vec::with_capacity(slot.len());
        for moment in slot.iter() {
            let value = moment.dequantized();
            let eff = moment_config(&cfg, value.shape());
            next.push(Moment::Quantized(quant::quantize(&value, &eff)?));
        }
        *slot = next;
        match which {
            MomentKind::M => self.m_quant = Some(cfg),
            MomentKind::V => self.v_quant = Some(cfg),
        }
        Ok(())
    }

    /// Fraction of quantized entries of one moment that sit in the zero bin,
    /// weighted by entry count across parameters.
    pub fn zero_bin_fraction(&self, which: MomentKind) -> Option<f64> {
        let (mut zero, mut total) = (0usize, 0usize);
        for moment in self.moments(which) {
            if let Moment::Quantized(q) = moment {
                zero += q.zero_bin_count();
                total += q.len();
            }
        }
        (total > 0).then(|| zero as f64 / total as f64)
    }
}

fn store(value: Tensor, cfg: Option<QuantConfig>) -> Result<Moment> {
    match cfg {
        None => Ok(Moment::Real(value)),
        Some(cfg) => {
            let eff = moment_config(&cfg, value.shape());
            Ok(Moment::Quantized(quant::quantize(&value, &eff)?))
        }
    }
}

/// One AdamW update of every parameter in place. `decay[i]` selects whether
/// weight decay applies to parameter `i`.
pub fn adam_step(
    params: &mut [Tensor],
    decay: &[bool],
    grads: &[Tensor],
    store_: &mut MomentStore,
    h: &mut AdamHyper,
) -> Result<StepStats> {
    h.validate()?;
    if params.len() != grads.len() || params.len() != store_.len() || params.len() != decay.len() {
        return Err(Error::Shape(format!(
            "{} params, {} grads, {} moments, {} decay flags",
            params.len(),
            grads.len(),
            store_.len(),
            decay.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        p.expect_same_shape(g)?;
        if p.shape() != store_.m[i].shape() {
            return Err(Error::Shape(format!(
                "moment {i} has shape {:?}, parameter has {:?}",
                store_.m[i].shape(),
                p.shape()
            )));
        }
    }

    let t = h.t + 1;
    let (b1, b2, lr, eps) = (h.beta1, h.beta2, h.lr, h.eps);
    let bc1 = 1.0 - b1.powf(t as f64);
    let bc2 = 1.0 - b2.powf(t as f64);
    let bound = h.ratio_bound(t) * (1.0 + 1e-9);
    let mut stats = StepStats::default();

    // Compute everything before touching state so a quantizer error leaves it intact.
    let mut new_params = Vec::with_capacity(params.len());
    let mut new_m = Vec::with_capacity(params.len());
    let mut new_v = Vec::with_capacity(params.len());
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let mut m = store_.m[i].dequantized().into_data();
        let mut v = store_.v[i].dequantized().into_data();
        let wd = if decay[i] { h.weight_decay } else { 0.0 };
        let mut theta = p.data().to_vec();
        for (j, &gj) in g.data().iter().enumerate() {
            let mut vin = v[j];
            if vin < 0.0 {
                stats.clamp_count += 1;
                vin = 0.0;
            }
            let mj = b1 * m[j] + (1.0 - b1) * gj;
            let vj = b2 * vin + (1.0 - b2) * gj * gj;
            let m_hat = mj / bc1;
            let v_hat = vj / bc2;
            let denom = v_hat.sqrt();
            if m_hat.abs() > bound * denom {
                stats.overshoot_count += 1;
            }
            let ratio = m_hat / (denom + eps);
            stats.max_update_ratio = stats.max_update_ratio.max(ratio.abs());
            theta[j] = theta[j] - lr * ratio - lr * wd * theta[j];
            m[j] = mj;
            v[j] = vj;
        }
        let shape = p.shape();
        new_params.push(Tensor::new(theta, shape)?);
        new_m.push(store(Tensor::new(m, shape)?, store_.m_quant)?);
        new_v.push(store(Tensor::new(v, shape)?, store_.v_quant)?);
    }

    for (p, np) in params.iter_mut().zip(new_params) {
        *p = np;
    }
    store_.m = new_m;
    store_.v = new_v;
    h.t = t;
    stats.v_zero_bin_fraction = store_.zero_bin_fraction(MomentKind::V);
    stats.m_zero_bin_fraction = store_.zero_bin_fraction(MomentKind::M);
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn hyper(lr: f64, b2: f64, wd: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: b2,
            eps: 1e-8,
            weight_decay: wd,
            t: 0,
        }
    }

    #[test]
    fn one_step_from_zero_state() {
        let mut p = vec![Tensor::vector(&[0.0])];
        let mut s = MomentStore::new(&[&[1]], None, None).unwrap();
        let mut h = hyper(1e-3, 0.999, 0.0);
        adam_step(&mut p, &[false], &[Tensor::vector(&[1.0])], &mut s, &mut h).unwrap();
        // m_hat = v_hat = 1, so the step is -lr / (1 + eps)
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-18);
        assert!((p[0].data()[0] + 9.99999e-4).abs() < 1e-9);
        assert_eq!(h.t, 1);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = vec![Tensor::vector(&[2.0, -4.0]), Tensor::vector(&[1.0])];
        let mut s = MomentStore::new(&[&[2], &[1]], None, None).unwrap();
        let mut h = hyper(0.01, 0.95, 0.1);
        let grads = [Tensor::zeros(&[2]), Tensor::zeros(&[1])];
        adam_step(&mut p, &[true, false], &grads, &mut s, &mut h).unwrap();
        assert_eq!(p[0].data(), &[2.0 - 0.01 * 0.1 * 2.0, -4.0 + 0.01 * 0.1 * 4.0]);
        assert_eq!(p[1].data(), &[1.0]);
    }

    #[test]
    fn per_channel_round_trip_within_half_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..48).map(|_| StandardNormal.sample(&mut rng)).collect();
        let m = Tensor::new(data, &[6, 8]).unwrap();
        let mut s = MomentStore::from_parts(
            vec![Moment::Real(m.clone())],
            vec![Moment::Real(Tensor::zeros(&[6, 8]))],
            None,
            None,
        )
        .unwrap();
        let cfg = QuantConfig::symmetric(8, Granularity::PerChannel { axis: 0 }).unwrap();
        s.quantize_state(MomentKind::M, cfg).unwrap();
        let Moment::Quantized(q) = &s.moments(MomentKind::M)[0] else {
            panic!("m not quantized");
        };
        assert_eq!(q.scales().len(), 6);
        let back = quant::dequantize(q);
        for (i, (a, b)) in m.data().iter().zip(back.data()).enumerate() {
            assert!((a - b).abs() <= q.scales()[i / 8] / 2.0 + 1e-15);
        }
    }

    #[test]
    fn heavy_tailed_second_moment_collapses_to_zero_bin() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut data: Vec<f64> = (0..4096)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * z
            })
            .collect();
        data[17] = 1000.0 * data.iter().cloned().fold(0.0, f64::max);
        let mut s = MomentStore::from_parts(
            vec![Moment::Real(Tensor::zeros(&[4096]))],
            vec![Moment::Real(Tensor::new(data, &[4096]).unwrap())],
            None,
            None,
        )
        .unwrap();
        s.quantize_state(MomentKind::V, QuantConfig::symmetric(8, Granularity::PerTensor).unwrap())
            .unwrap();
        assert!(s.zero_bin_fraction(MomentKind::V).unwrap() > 0.5);
    }

    #[test]
    fn zero_moment_survives_round_trip() {
        let mut s = MomentStore::new(&[&[3, 4]], None, None).unwrap();
        let cfg = QuantConfig::symmetric(4, Granularity::PerChannel { axis: 0 }).unwrap();
        s.quantize_state(MomentKind::M, cfg).unwrap();
        assert_eq!(s.moments(MomentKind::M)[0].dequantized(), Tensor::zeros(&[3, 4]));
    }

    #[test]
    fn rank_one_moments_fall_back_to_per_tensor() {
        let cfg = QuantConfig::symmetric(4, Granularity::PerChannel { axis: 0 }).unwrap();
        let s = MomentStore::new(&[&[3, 4], &[4]], Some(cfg), None).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(moment_config(&cfg, &[3, 4]).granularity, cfg.granularity);
        assert_eq!(moment_config(&cfg, &[4]).granularity, Granularity::PerTensor);
        assert_eq!(moment_config(&cfg, &[]).granularity, Granularity::PerTensor);
        let bad = QuantConfig::symmetric(4, Granularity::PerChannel { axis: 1 }).unwrap();
        assert_eq!(moment_config(&bad, &[4]).granularity, Granularity::PerTensor);
        let tok = QuantConfig::symmetric(8, Granularity::PerToken).unwrap();
        assert!(MomentStore::new(&[&[3, 4]], None, Some(tok)).is_err());
    }

    #[test]
    fn exact_adam_never_overshoots_its_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = vec![Tensor::zeros(&[64])];
        let mut s = MomentStore::new(&[&[64]], None, None).unwrap();
        let mut h = AdamHyper::default();
        for step in 0..200 {
            let scale = if step % 50 == 0 { 100.0 } else { 1e-3 };
            let g: Vec<f64> = (0..64)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                })
                .collect();
            let stats =
                adam_step(&mut p, &[true], &[Tensor::new(g, &[64]).unwrap()], &mut s, &mut h).unwrap();
            assert_eq!(stats.overshoot_count, 0, "step {step}");
            assert_eq!(stats.clamp_count, 0);
        }
    }

    #[test]
    fn quantized_v_losing_history_overshoots() {
        let mut p = vec![Tensor::zeros(&[2])];
        let v_cfg = QuantConfig::symmetric(8, Granularity::PerTensor).unwrap();
        let mut s = MomentStore::new(&[&[2]], None, Some(v_cfg)).unwrap();
        let mut h = hyper(1e-3, 0.95, 0.0);
        // The second coordinate's v is far below half a step, so it lands in
        // the zero bin while its m keeps the history.
        let g1 = Tensor::vector(&[100.0, 1.0]);
        let stats = adam_step(&mut p, &[false], &[g1], &mut s, &mut h).unwrap();
        assert_eq!(stats.overshoot_count, 0);
        assert_eq!(stats.v_zero_bin_fraction, Some(0.5));
        let g2 = Tensor::vector(&[50.0, 1e-3]);
        let stats = adam_step(&mut p, &[false], &[g2], &mut s, &mut h).unwrap();
        assert_eq!(stats.overshoot_count, 1);
    }

    #[test]
    fn mismatched_inputs_leave_state_untouched() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut s = MomentStore::new(&[&[2]], None, None).unwrap();
        let mut h = AdamHyper::default();
        assert!(adam_step(&mut p, &[true], &[Tensor::zeros(&[3])], &mut s, &mut h).is_err());
        assert_eq!(h.t, 0);
        let mut bad = AdamHyper {
            beta2: 1.0,
            ..Default::default()
        };
        assert!(adam_step(&mut p, &[true], &[Tensor::zeros(&[2])], &mut s, &mut bad).is_err());
    }
}
