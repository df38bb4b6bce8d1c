//! Analyses of activations, gradients, quantized tensors and trained models.
//!
//! Reports serialize to JSON; histograms and loss surfaces also write plain
//! CSV tables (see [`Histogram::to_csv`] and [`LossSurface2D::to_csv`]).

pub mod cost;
pub mod landscape;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{fake_quantize_tensor, QuantConfig, QuantizedTensor};
use crate::tensor::Tensor;

pub use cost::{linear_flop_fraction, memory_estimate, MemoryBreakdown, OptimizerKind, PeakScenario};
pub use landscape::{
    filter_normalized_direction, loss_surface_2d, m_sharpness, sharpness_report, LinearProbe, LossSurface2D, ModelObjective, Objective,
    QuadraticProbe, SharpnessEntry, SharpnessReport, DEFAULT_RHOS, DEFAULT_SHARPNESS_M,
};

pub const DEFAULT_OUTLIER_K: f64 = 10.0;

/// Per-channel statistics of one `[tokens, channels]` capture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub max_abs: Vec<f64>,
    pub mean_abs: Vec<f64>,
    pub std: Vec<f64>,
    pub median_max_abs: f64,
    /// Channels with `max_abs > k * median_max_abs`, ascending.
    pub outliers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelOutlierReport {
    pub layer: String,
    pub k: f64,
    pub steps: Vec<u64>,
    pub per_step: Vec<ChannelStats>,
    /// Outlier channel -> steps at which it was flagged.
    pub persistence: BTreeMap<usize, Vec<u64>>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn channel_outliers(acts: &Tensor, k: f64) -> Result<ChannelStats> {
    if acts.is_empty() {
        return Err(Error::Data("empty activation capture".into()));
    }
    if !(k >= 0.0) {
        return Err(Error::InvalidConfig(format!("outlier threshold k={k} must be non-negative")));
    }
    acts.expect_finite("activation capture")?;
    let (tokens, channels) = acts.rows_cols();
    let mut max_abs = vec![0.0f64; channels];
    let mut sum_abs = vec![0.0; channels];
    let mut sum = vec![0.0; channels];
    for row in acts.data().chunks(channels) {
        for (c, &x) in row.iter().enumerate() {
            max_abs[c] = max_abs[c].max(x.abs());
            sum_abs[c] += x.abs();
            sum[c] += x;
        }
    }
    let n = tokens as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mut var = vec![0.0; channels];
    for row in acts.data().chunks(channels) {
        for (c, &x) in row.iter().enumerate() {
            var[c] += (x - mean[c]).powi(2);
        }
    }
    let median_max_abs = median(&max_abs);
    let outliers = (0..channels)
        .filter(|&c| max_abs[c] > k * median_max_abs)
        .collect();
    Ok(ChannelStats {
        mean_abs: sum_abs.iter().map(|s| s / n).collect(),
        std: var.iter().map(|v| (v / n).sqrt()).collect(),
        max_abs,
        median_max_abs,
        outliers,
    })
}

/// Outlier analysis of several captures of one layer, tagged by training step.
pub fn outlier_report(layer: &str, captures: &[(u64, Tensor)], k: f64) -> Result<ChannelOutlierReport> {
    if captures.is_empty() {
        return Err(Error::Data(format!("no captures for layer {layer}")));
    }
    let channels = captures[0].1.rows_cols().1;
    let mut per_step = Vec::with_capacity(captures.len());
    let mut persistence: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for (step, acts) in captures {
        if acts.rows_cols().1 != channels {
            return Err(Error::Shape(format!(
                "capture at step {step} has {} channels, expected {channels}",
                acts.rows_cols().1
            )));
        }
        let stats = channel_outliers(acts, k)?;
        for &c in &stats.outliers {
            persistence.entry(c).or_default().push(*step);
        }
        per_step.push(stats);
    }
    Ok(ChannelOutlierReport {
        layer: layer.to_string(),
        k,
        steps: captures.iter().map(|(s, _)| *s).collect(),
        per_step,
        persistence,
    })
}

/// `||X - fq(X)||_2`.
pub fn quant_error_norm(x: &Tensor, cfg: &QuantConfig) -> Result<f64> {
    let q = fake_quantize_tensor(x, cfg)?;
    Ok(x.data()
        .iter()
        .zip(q.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Fraction of entries with `|g| <= tau`.
pub fn gradient_sparsity(g: &Tensor, tau: f64) -> Result<f64> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidConfig(format!("threshold {tau} must be non-negative")));
    }
    if g.is_empty() {
        return Ok(0.0);
    }
    let small = g.data().iter().filter(|x| x.abs() <= tau).count();
    Ok(small as f64 / g.len() as f64)
}

/// Fraction of entries stored on the grid point that dequantizes to zero.
pub fn zero_bin_fraction(q: &QuantizedTensor) -> f64 {
    if q.is_empty() {
        return 0.0;
    }
    q.zero_bin_count() as f64 / q.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` ascending edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("left,right,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        out
    }
}

/// Equal-width histogram over `[min, max]` of the finite entries.
pub fn histogram(x: &Tensor, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::InvalidConfig("histogram needs at least one bin".into()));
    }
    x.expect_finite("histogram input")?;
    if x.is_empty() {
        return Err(Error::Data("histogram of an empty tensor".into()));
    }
    let lo = x.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo == hi { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect();
    let mut counts = vec![0u64; bins];
    for &v in x.data() {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    Ok(Histogram { edges, counts })
}
