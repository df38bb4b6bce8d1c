//! Linear integer quantization.
//!
//! A real tensor is split into groups (the whole tensor, one channel along an
//! axis, or one token row). Each group gets a scale `s = max|x| / P` and, in
//! asymmetric mode, an offset `z = round(min(x) / s)`. Values map to
//!
//! ```text
//! q  = clip(round(x / s) - z, N, P)        N = -2^(b-1), P = 2^(b-1) - 1
//! x' = s * (q + z)
//! ```
//!
//! Rounding is half-away-from-zero. A group whose max-abs is zero, or so
//! small that `max / P` underflows, uses `s = 1` so every entry lands on the
//! zero grid point.
//!
//! [`fake_quantize`] applies quantize then dequantize inside an autodiff graph
//! with a straight-through gradient.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

/// How elements are grouped to share a scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Granularity {
    PerTensor,
    /// One scale per index along `axis`.
    PerChannel { axis: usize },
    /// One scale per row after flattening all leading axes into tokens.
    PerToken,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Granularity::PerTensor => write!(f, "tensor"),
            Granularity::PerChannel { axis } => write!(f, "channel:{axis}"),
            Granularity::PerToken => write!(f, "token"),
        }
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tensor" => Ok(Granularity::PerTensor),
            "token" => Ok(Granularity::PerToken),
            _ => {
                let axis = s
                    .strip_prefix("channel:")
                    .and_then(|a| a.parse::<usize>().ok())
                    .ok_or_else(|| {
                        Error::InvalidConfig(format!(
                            "granularity must be tensor, token or channel:<axis>, got {s:?}"
                        ))
                    })?;
                Ok(Granularity::PerChannel { axis })
            }
        }
    }
}

impl Serialize for Granularity {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Granularity {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u8,
    pub granularity: Granularity,
    #[serde(default = "symmetric_mode")]
    pub mode: QuantMode,
}

fn symmetric_mode() -> QuantMode {
    QuantMode::Symmetric
}

impl QuantConfig {
    pub fn new(bits: u8, granularity: Granularity, mode: QuantMode) -> Result<Self> {
        quant_range(bits)?;
        Ok(Self {
            bits,
            granularity,
            mode,
        })
    }

    pub fn symmetric(bits: u8, granularity: Granularity) -> Result<Self> {
        Self::new(bits, granularity, QuantMode::Symmetric)
    }

    pub fn range(&self) -> Result<QuantRange> {
        quant_range(self.bits)
    }

    /// Checks bit width and that the granularity fits a tensor of `shape`.
    pub fn validate_for(&self, shape: &[usize]) -> Result<()> {
        self.range()?;
        GroupLayout::new(shape, self.granularity).map(|_| ())
    }
}

impl fmt::Display for QuantConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            QuantMode::Symmetric => "sym",
            QuantMode::Asymmetric => "asym",
        };
        write!(f, "int{}/{}/{}", self.bits, self.granularity, mode)
    }
}

/// Integer clip bounds for a bit width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantRange {
    pub n: i32,
    pub p: i32,
}

pub fn quant_range(bits: u8) -> Result<QuantRange> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::InvalidConfig(format!(
            "bit width {bits} outside [{MIN_BITS}, {MAX_BITS}]"
        )));
    }
    let half = 1i32 << (bits - 1);
    Ok(QuantRange {
        n: -half,
        p: half - 1,
    })
}

/// Maps flat element indices to quantization groups: `group = (i / inner) % groups`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupLayout {
    pub groups: usize,
    pub inner: usize,
}

impl GroupLayout {
    pub fn new(shape: &[usize], granularity: Granularity) -> Result<Self> {
        let n: usize = shape.iter().product();
        match granularity {
            Granularity::PerTensor => Ok(Self {
                groups: 1,
                inner: n.max(1),
            }),
            Granularity::PerChannel { axis } => {
                if axis >= shape.len() {
                    return Err(Error::InvalidConfig(format!(
                        "channel axis {axis} invalid for tensor of rank {}",
                        shape.len()
                    )));
                }
                Ok(Self {
                    groups: shape[axis],
                    inner: shape[axis + 1..].iter().product::<usize>().max(1),
                })
            }
            Granularity::PerToken => {
                let last = shape.last().copied().unwrap_or(1).max(1);
                Ok(Self {
                    groups: n / last,
                    inner: last,
                })
            }
        }
    }

    #[inline]
    pub fn group_of(&self, flat_index: usize) -> usize {
        if self.groups <= 1 {
            0
        } else {
            (flat_index / self.inner) % self.groups
        }
    }
}

/// The stored low-precision form of a tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    int_values: Vec<i8>,
    scales: Vec<f64>,
    zero_points: Vec<i32>,
    config: QuantConfig,
    source_shape: Vec<usize>,
}

impl QuantizedTensor {
    /// Rebuilds a quantized tensor from stored parts, checking every invariant.
    pub fn from_parts(
        int_values: Vec<i8>,
        scales: Vec<f64>,
        zero_points: Vec<i32>,
        config: QuantConfig,
        source_shape: Vec<usize>,
    ) -> Result<Self> {
        let range = config.range()?;
        let layout = GroupLayout::new(&source_shape, config.granularity)?;
        let n: usize = source_shape.iter().product();
        if int_values.len() != n {
            return Err(Error::Shape(format!(
                "{} int values for shape {:?}",
                int_values.len(),
                source_shape
            )));
        }
        if scales.len() != layout.groups || zero_points.len() != layout.groups {
            return Err(Error::Shape(format!(
                "expected {} groups, got {} scales and {} zero points",
                layout.groups,
                scales.len(),
                zero_points.len()
            )));
        }
        if let Some(q) = int_values
            .iter()
            .find(|&&q| (q as i32) < range.n || (q as i32) > range.p)
        {
            return Err(Error::Data(format!(
                "int value {q} outside [{}, {}]",
                range.n, range.p
            )));
        }
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Data(format!("scale {s} is not positive and finite")));
        }
        if config.mode == QuantMode::Symmetric && zero_points.iter().any(|&z| z != 0) {
            return Err(Error::Data("symmetric tensor with nonzero zero point".into()));
        }
        Ok(Self {
            int_values,
            scales,
            zero_points,
            config,
            source_shape,
        })
    }

    pub fn int_values(&self) -> &[i8] {
        &self.int_values
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[i32] {
        &self.zero_points
    }

    pub fn config(&self) -> &QuantConfig {
        &self.config
    }

    pub fn source_shape(&self) -> &[usize] {
        &self.source_shape
    }

    pub fn len(&self) -> usize {
        self.int_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.int_values.is_empty()
    }

    pub fn layout(&self) -> GroupLayout {
        GroupLayout::new(&self.source_shape, self.config.granularity)
            .expect("layout validated at construction")
    }

    /// Number of entries stored on the grid point that dequantizes to exactly zero.
    pub fn zero_bin_count(&self) -> usize {
        let layout = self.layout();
        self.int_values
            .iter()
            .enumerate()
            .filter(|(i, &q)| q as i32 == -self.zero_points[layout.group_of(*i)])
            .count()
    }
}

/// Per-group scales and zero points for `x`.
pub fn compute_scale(x: &Tensor, cfg: &QuantConfig) -> Result<(Vec<f64>, Vec<i32>)> {
    let range = cfg.range()?;
    x.expect_finite("quantize input")?;
    let layout = GroupLayout::new(x.shape(), cfg.granularity)?;

    let mut max_abs = vec![0.0f64; layout.groups];
    let mut min = vec![f64::INFINITY; layout.groups];
    for (i, &v) in x.data().iter().enumerate() {
        let g = layout.group_of(i);
        max_abs[g] = max_abs[g].max(v.abs());
        min[g] = min[g].min(v);
    }

    let p = range.p as f64;
    let scales: Vec<f64> = max_abs
        .iter()
        .map(|&m| if m / p == 0.0 { 1.0 } else { m / p })
        .collect();
    let zero_points = match cfg.mode {
        QuantMode::Symmetric => vec![0; layout.groups],
        QuantMode::Asymmetric => min
            .iter()
            .zip(&scales)
            .map(|(&lo, &s)| if lo.is_finite() { (lo / s).round() as i32 } else { 0 })
            .collect(),
    };
    Ok((scales, zero_points))
}

pub fn quantize(x: &Tensor, cfg: &QuantConfig) -> Result<QuantizedTensor> {
    let (scales, zero_points) = compute_scale(x, cfg)?;
    quantize_with_params(x, cfg, scales, zero_points)
}

/// Quantizes with caller-supplied scales and zero points; values outside the
/// representable range saturate at `N` or `P`.
pub fn quantize_with_params(
    x: &Tensor,
    cfg: &QuantConfig,
    scales: Vec<f64>,
    zero_points: Vec<i32>,
) -> Result<QuantizedTensor> {
    let range = cfg.range()?;
    x.expect_finite("quantize input")?;
    let layout = GroupLayout::new(x.shape(), cfg.granularity)?;
    if scales.len() != layout.groups || zero_points.len() != layout.groups {
        return Err(Error::Shape(format!(
            "{} groups but {} scales / {} zero points",
            layout.groups,
            scales.len(),
            zero_points.len()
        )));
    }
    let (lo, hi) = (range.n as f64, range.p as f64);
    let int_values = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let g = layout.group_of(i);
            let q = (v / scales[g]).round() - zero_points[g] as f64;
            q.clamp(lo, hi) as i8
        })
        .collect();
    QuantizedTensor::from_parts(
        int_values,
        scales,
        zero_points,
        *cfg,
        x.shape().to_vec(),
    )
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let layout = q.layout();
    let data = q
        .int_values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let g = layout.group_of(i);
            q.scales[g] * (v as f64 + q.zero_points[g] as f64)
        })
        .collect();
    Tensor::new(data, &q.source_shape).expect("shape validated at construction")
}

/// `dequantize(quantize(x))` on plain tensors.
pub fn fake_quantize_tensor(x: &Tensor, cfg: &QuantConfig) -> Result<Tensor> {
    Ok(dequantize(&quantize(x, cfg)?))
}

/// Fake-quantization node: the forward value carries the quantization error,
/// the backward pass hands the upstream gradient to `x` unchanged.
pub fn fake_quantize(g: &mut Graph, x: Var, cfg: &QuantConfig) -> Result<Var> {
    let value = fake_quantize_tensor(g.value(x), cfg)?;
    g.custom_grad(value, &[x], Box::new(|upstream, _| Ok(vec![Some(upstream.clone())])))
}
