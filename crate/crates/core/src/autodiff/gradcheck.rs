//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of every backward rule it checks. Non-scalar outputs are contracted with a
//! fixed pseudo-random cotangent before differencing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Entries whose analytic and numeric gradients are both below this are
/// compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Worst elementwise relative error over all checked inputs.
    pub max_rel_err: f64,
    /// `(input index, flat element index)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares backprop gradients of `build` against central differences with step `h`.
///
/// `build` receives a fresh graph and one leaf per input (all requiring grad)
/// and returns the output node.
pub fn check<F>(inputs: &[Tensor], h: f64, seed: u64, build: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &vars)?;
        Ok((g, vars, out))
    };

    let (g, vars, out) = eval(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_shape = g.value(out).shape().to_vec();
    let cotangent: Vec<f64> = (0..g.value(out).len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let cotangent = Tensor::new(cotangent, &out_shape)?;
    let grads = g.backward_with(out, cotangent.clone())?;

    let project = |values: &[Tensor]| -> Result<f64> {
        let (g, _, out) = eval(values)?;
        Ok(g.value(out)
            .data()
            .iter()
            .zip(cotangent.data())
            .map(|(a, b)| a * b)
            .sum())
    };

    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[which].shape()));
        for j in 0..inputs[which].len() {
            let orig = inputs[which].data()[j];
            probe[which].data_mut()[j] = orig + h;
            let plus = project(&probe)?;
            probe[which].data_mut()[j] = orig - h;
            let minus = project(&probe)?;
            probe[which].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(ABS_FLOOR);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_err || !rel.is_finite() {
                report.max_rel_err = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst = (which, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Deterministic standard-ish random tensor for fixtures.
pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(data, shape).expect("length matches shape")
}
