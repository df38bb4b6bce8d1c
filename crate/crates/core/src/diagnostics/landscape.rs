//! Flatness probes: m-sharpness and filter-normalized 2-D loss surfaces.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, GptModel, TokenBlock};
use crate::tensor::Tensor;

pub const DEFAULT_SHARPNESS_M: usize = 32;
pub const DEFAULT_RHOS: [f64; 4] = [0.01, 0.02, 0.05, 0.1];

/// A loss over a fixed set of examples, evaluated at arbitrary parameters.
pub trait Objective {
    /// The point being analyzed.
    fn params(&self) -> Vec<Tensor>;
    fn num_examples(&self) -> usize;
    /// Mean loss over `examples`.
    fn loss(&self, params: &[Tensor], examples: Range<usize>) -> Result<f64>;
    /// Mean loss over `examples` and its gradient.
    fn loss_grad(&self, params: &[Tensor], examples: Range<usize>) -> Result<(f64, Vec<Tensor>)>;
}

/// `L(theta) = a . theta`, identical for every example.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub a: Vec<f64>,
    pub theta: Vec<f64>,
    pub examples: usize,
}

impl Objective for LinearProbe {
    fn params(&self) -> Vec<Tensor> {
        vec![Tensor::vector(&self.theta)]
    }
    fn num_examples(&self) -> usize {
        self.examples
    }
    fn loss(&self, params: &[Tensor], _: Range<usize>) -> Result<f64> {
        Ok(self.a.iter().zip(params[0].data()).map(|(a, t)| a * t).sum())
    }
    fn loss_grad(&self, params: &[Tensor], r: Range<usize>) -> Result<(f64, Vec<Tensor>)> {
        Ok((self.loss(params, r)?, vec![Tensor::vector(&self.a)]))
    }
}

/// `L(theta) = 1/2 sum_i lambda_i theta_i^2`, identical for every example.
#[derive(Debug, Clone)]
pub struct QuadraticProbe {
    pub lambda: Vec<f64>,
    pub theta: Vec<f64>,
    pub examples: usize,
}

impl Objective for QuadraticProbe {
    fn params(&self) -> Vec<Tensor> {
        vec![Tensor::vector(&self.theta)]
    }
    fn num_examples(&self) -> usize {
        self.examples
    }
    fn loss(&self, params: &[Tensor], _: Range<usize>) -> Result<f64> {
        Ok(0.5 * self.lambda.iter().zip(params[0].data()).map(|(l, t)| l * t * t).sum::<f64>())
    }
    fn loss_grad(&self, params: &[Tensor], r: Range<usize>) -> Result<(f64, Vec<Tensor>)> {
        let g: Vec<f64> = self.lambda.iter().zip(params[0].data()).map(|(l, t)| l * t).collect();
        Ok((self.loss(params, r)?, vec![Tensor::vector(&g)]))
    }
}

/// A model scored on fixed `context_length + 1`-token windows.
pub struct ModelObjective {
    model: GptModel,
    windows: Vec<Vec<u32>>,
    chunk: usize,
}

impl ModelObjective {
    pub fn new(model: GptModel, windows: Vec<Vec<u32>>, chunk: usize) -> Result<Self> {
        let cols = model.config().context_length + 1;
        if let Some(w) = windows.iter().find(|w| w.len() != cols) {
            return Err(Error::Shape(format!("window of {} tokens, expected {cols}", w.len())));
        }
        Ok(Self {
            model,
            windows,
            chunk: chunk.max(1),
        })
    }

    fn at(&self, params: &[Tensor]) -> Result<GptModel> {
        let mut m = self.model.clone();
        if params.len() != m.params().len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors, model has {}",
                params.len(),
                m.params().len()
            )));
        }
        for (p, v) in m.params_mut().iter_mut().zip(params) {
            p.value.expect_same_shape(v)?;
            p.value = v.clone();
        }
        Ok(m)
    }

    fn blocks(&self, r: Range<usize>) -> Result<Vec<TokenBlock>> {
        if r.end > self.windows.len() || r.is_empty() {
            return Err(Error::Data(format!("example range {r:?} outside 0..{}", self.windows.len())));
        }
        let cols = self.model.config().context_length + 1;
        self.windows[r]
            .chunks(self.chunk)
            .map(|g| TokenBlock::new(g.len(), cols, g.concat()))
            .collect()
    }
}

impl Objective for ModelObjective {
    fn params(&self) -> Vec<Tensor> {
        self.model.params().iter().map(|p| p.value.clone()).collect()
    }
    fn num_examples(&self) -> usize {
        self.windows.len()
    }
    fn loss(&self, params: &[Tensor], r: Range<usize>) -> Result<f64> {
        let n = r.len() as f64;
        let m = self.at(params)?;
        let mut sum = 0.0;
        for b in self.blocks(r)? {
            sum += m.loss(&b)? * b.batch as f64;
        }
        Ok(sum / n)
    }
    fn loss_grad(&self, params: &[Tensor], r: Range<usize>) -> Result<(f64, Vec<Tensor>)> {
        let n = r.len() as f64;
        let m = self.at(params)?;
        let mut sum = 0.0;
        let mut grads: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        for b in self.blocks(r)? {
            let w = b.batch as f64 / n;
            let out = m.loss_and_grads(&b, &ForwardOptions::default())?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite(format!("loss {}", out.loss)));
            }
            sum += out.loss * b.batch as f64;
            for (acc, g) in grads.iter_mut().zip(&out.grads) {
                acc.add_assign(&g.map(|x| x * w))?;
            }
        }
        Ok((sum / n, grads))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpnessEntry {
    pub rho: f64,
    pub sharpness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessReport {
    pub m: usize,
    pub batches: usize,
    pub entries: Vec<SharpnessEntry>,
}

fn global_norm(ts: &[Tensor]) -> f64 {
    ts.iter().map(|t| t.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

fn axpy(params: &[Tensor], terms: &[(f64, &[Tensor])]) -> Result<Vec<Tensor>> {
    params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut out = p.clone();
            for (c, dir) in terms {
                let d = &dir[i];
                p.expect_same_shape(d)?;
                out.data_mut().iter_mut().zip(d.data()).for_each(|(o, x)| *o += c * x);
            }
            Ok(out)
        })
        .collect()
}

/// Mean over disjoint batches of `m` examples of
/// `L_B(w + rho g_B/||g_B||) - L_B(w)`; batches with a zero gradient add 0.
pub fn m_sharpness(obj: &dyn Objective, rho: f64, m: usize) -> Result<f64> {
    Ok(sharpness_report(obj, &[rho], m)?.entries[0].sharpness)
}

/// [`m_sharpness`] for several radii, sharing the per-batch gradients.
pub fn sharpness_report(obj: &dyn Objective, rhos: &[f64], m: usize) -> Result<SharpnessReport> {
    if m == 0 {
        return Err(Error::InvalidConfig("m must be positive".into()));
    }
    if let Some(r) = rhos.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
        return Err(Error::InvalidConfig(format!("rho {r} must be finite and non-negative")));
    }
    let batches = obj.num_examples() / m;
    if batches == 0 {
        return Err(Error::Data(format!(
            "{} examples are fewer than one batch of {m}",
            obj.num_examples()
        )));
    }
    let w = obj.params();
    let mut sums = vec![0.0; rhos.len()];
    for b in 0..batches {
        let range = b * m..(b + 1) * m;
        let (base, g) = obj.loss_grad(&w, range.clone())?;
        let norm = global_norm(&g);
        if norm == 0.0 {
            continue;
        }
        for (sum, &rho) in sums.iter_mut().zip(rhos) {
            let moved = axpy(&w, &[(rho / norm, &g)])?;
            *sum += obj.loss(&moved, range.clone())? - base;
        }
    }
    Ok(SharpnessReport {
        m,
        batches,
        entries: rhos
            .iter()
            .zip(sums)
            .map(|(&rho, s)| SharpnessEntry {
                rho,
                sharpness: s / batches as f64,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSurface2D {
    /// Grid coordinates shared by both axes, symmetric around 0.
    pub coords: Vec<f64>,
    /// `loss[i][j]` at `w + coords[i] d1 + coords[j] d2`.
    pub loss: Vec<Vec<f64>>,
    pub seed: u64,
    #[serde(skip)]
    pub d1: Vec<Tensor>,
    #[serde(skip)]
    pub d2: Vec<Tensor>,
}

impl LossSurface2D {
    pub fn center(&self) -> f64 {
        let c = self.coords.len() / 2;
        self.loss[c][c]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,beta,loss\n");
        for (i, row) in self.loss.iter().enumerate() {
            for (j, l) in row.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", self.coords[i], self.coords[j], l));
            }
        }
        out
    }
}

/// A Gaussian direction rescaled so each row of a matrix block (each whole
/// vector block) has the norm of the matching row of `params`.
pub fn filter_normalized_direction(params: &[Tensor], rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    params
        .iter()
        .map(|p| {
            let data: Vec<f64> = (0..p.len()).map(|_| StandardNormal.sample(&mut *rng)).collect();
            let mut d = Tensor::new(data, p.shape()).expect("shape matches");
            let cols = if p.rank() >= 2 { p.rows_cols().1 } else { p.len().max(1) };
            for (dr, pr) in d.data_mut().chunks_mut(cols).zip(p.data().chunks(cols)) {
                let dn = dr.iter().map(|x| x * x).sum::<f64>().sqrt();
                let pn = pr.iter().map(|x| x * x).sum::<f64>().sqrt();
                let s = if dn > 0.0 { pn / dn } else { 0.0 };
                dr.iter_mut().for_each(|x| *x *= s);
            }
            d
        })
        .collect()
}

/// Loss on all examples over `[-extent, extent]^2` along two random
/// filter-normalized directions. `resolution` must be odd and at least 3 so
/// the center cell is the unperturbed point.
pub fn loss_surface_2d(obj: &dyn Objective, extent: f64, resolution: usize, seed: u64) -> Result<LossSurface2D> {
    if resolution < 3 || resolution.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "resolution {resolution} must be odd and at least 3"
        )));
    }
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(Error::InvalidConfig(format!("extent {extent} must be positive")));
    }
    let all = 0..obj.num_examples();
    let w = obj.params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d1 = filter_normalized_direction(&w, &mut rng);
    let d2 = filter_normalized_direction(&w, &mut rng);
    let half = (resolution - 1) as f64;
    let coords: Vec<f64> = (0..resolution)
        .map(|i| extent * (2.0 * i as f64 - half) / half)
        .collect();
    let mut loss = Vec::with_capacity(resolution);
    for &a in &coords {
        let mut row = Vec::with_capacity(resolution);
        for &b in &coords {
            let p = if a == 0.0 && b == 0.0 { w.clone() } else { axpy(&w, &[(a, &d1), (b, &d2)])? };
            row.push(obj.loss(&p, all.clone())?);
        }
        loss.push(row);
    }
    Ok(LossSurface2D {
        coords,
        loss,
        seed,
        d1,
        d2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn quad() -> QuadraticProbe {
        QuadraticProbe {
            lambda: vec![2.0],
            theta: vec![1.0],
            examples: 8,
        }
    }

    #[test]
    fn probes_match_closed_forms() {
        let lin = LinearProbe {
            a: vec![3.0, -4.0],
            theta: vec![0.5, 0.25],
            examples: 4,
        };
        for rho in [0.0, 0.01, 0.1, 1.0] {
            assert!((m_sharpness(&lin, rho, 2).unwrap() - 5.0 * rho).abs() < 1e-12);
            assert!((m_sharpness(&quad(), rho, 4).unwrap() - (2.0 * rho + rho * rho)).abs() < 1e-12);
        }
        let flat = QuadraticProbe {
            lambda: vec![1.0],
            theta: vec![0.0],
            examples: 2,
        };
        assert_eq!(m_sharpness(&flat, 0.5, 1).unwrap(), 0.0);
        assert!(m_sharpness(&quad(), 0.1, 9).is_err());
        assert!(m_sharpness(&quad(), -0.1, 1).is_err());
    }

    #[test]
    fn surface_of_quadratic_is_a_paraboloid() {
        let q = QuadraticProbe {
            lambda: vec![1.0, 3.0, 0.5],
            theta: vec![0.4, -1.0, 2.0],
            examples: 1,
        };
        let s = loss_surface_2d(&q, 1.0, 5, 7).unwrap();
        let (d1, d2) = (s.d1[0].data(), s.d2[0].data());
        for (i, &a) in s.coords.iter().enumerate() {
            for (j, &b) in s.coords.iter().enumerate() {
                let expected: f64 = (0..3)
                    .map(|k| 0.5 * q.lambda[k] * (q.theta[k] + a * d1[k] + b * d2[k]).powi(2))
                    .sum();
                assert!((s.loss[i][j] - expected).abs() < 1e-12);
            }
        }
        assert_eq!(s.coords[2], 0.0);
        assert!(loss_surface_2d(&q, 1.0, 4, 7).is_err());
        assert!(s.to_csv().lines().count() == 26);
    }

    #[test]
    fn directions_are_filter_normalized() {
        let p = vec![
            Tensor::from_rows(&[&[3.0, 4.0], &[0.0, 1.0], &[0.0, 0.0]]).unwrap(),
            Tensor::vector(&[1.0, 2.0, 2.0]),
        ];
        let d = filter_normalized_direction(&p, &mut ChaCha8Rng::seed_from_u64(1));
        let rn = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rows: Vec<f64> = d[0].data().chunks(2).map(rn).collect();
        assert!((rows[0] - 5.0).abs() < 1e-12 && (rows[1] - 1.0).abs() < 1e-12 && rows[2] == 0.0);
        assert!((rn(d[1].data()) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn model_surface_center_is_exact() {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            context_length: 6,
            ..ModelConfig::toy()
        };
        let model = GptModel::new(cfg, 1).unwrap();
        let windows: Vec<Vec<u32>> = (0..4).map(|i| (0..7).map(|j| (i * 7 + j) as u32 % 40).collect()).collect();
        let obj = ModelObjective::new(model, windows, 3).unwrap();
        let s = loss_surface_2d(&obj, 0.5, 3, 3).unwrap();
        let base = obj.loss(&obj.params(), 0..4).unwrap();
        assert_eq!(s.center().to_bits(), base.to_bits());
        let r = sharpness_report(&obj, &[0.0, 0.05], 2).unwrap();
        assert_eq!(r.batches, 2);
        assert_eq!(r.entries[0].sharpness, 0.0);
        assert!(r.entries[1].sharpness > 0.0);
    }
}
