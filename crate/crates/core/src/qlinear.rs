//! Linear layer with fake quantization on weights, input activations and the
//! output gradient.
//!
//! Forward: `Y = X~ W~^T + b`, where `X~` and `W~` are fake-quantized when the
//! corresponding config is set. Backward:
//!
//! ```text
//! dX = dY W~            (full-precision dY)
//! dW = Q(dY)^T X~       (Q = grad-out fake quantizer, identity if unset)
//! db = column sums of dY
//! ```
//!
//! Gradients then pass through the fake-quant nodes of `X` and `W` unchanged.
//! `quantize_dx_path` switches `dX` to use `Q(dY)` as well; it exists only to
//! demonstrate the instability of quantizing the whole backward path.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels;
use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::quant::{fake_quantize, fake_quantize_tensor, Granularity, QuantConfig};
use crate::tensor::Tensor;

/// Which operands of a linear layer carry quantization.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerQuantSpec {
    pub weight: Option<QuantConfig>,
    pub activation: Option<QuantConfig>,
    pub grad_out: Option<QuantConfig>,
}

impl LayerQuantSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_disabled(&self) -> bool {
        self.weight.is_none() && self.activation.is_none() && self.grad_out.is_none()
    }

    /// Checks bit widths and that each target uses a supported granularity.
    /// Weights are `[out, in]`; activations and grad-out are `[tokens, features]`.
    pub fn validate(&self) -> Result<()> {
        if let Some(w) = &self.weight {
            if w.granularity == Granularity::PerToken {
                return Err(Error::InvalidConfig(
                    "weight quantization must be per-tensor or per-channel".into(),
                ));
            }
            w.validate_for(&[1, 1])?;
        }
        if let Some(a) = &self.activation {
            a.validate_for(&[1, 1])?;
        }
        if let Some(g) = &self.grad_out {
            if matches!(g.granularity, Granularity::PerChannel { .. }) {
                return Err(Error::InvalidConfig(
                    "grad-out quantization must be per-tensor or per-token".into(),
                ));
            }
            g.validate_for(&[1, 1])?;
        }
        Ok(())
    }
}

/// Accumulates `||dY - Q(dY)||^2` per layer name across backward passes.
#[derive(Debug, Clone, Default)]
pub struct GradOutErrors(Rc<RefCell<BTreeMap<String, f64>>>);

impl GradOutErrors {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&self, layer: &str, sq_err: f64) {
        *self.0.borrow_mut().entry(layer.to_string()).or_insert(0.0) += sq_err;
    }

    /// L2 error norms per layer accumulated so far.
    pub fn norms(&self) -> BTreeMap<String, f64> {
        self.0
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), v.sqrt()))
            .collect()
    }

    pub fn clear(&self) {
        self.0.borrow_mut().clear();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub dbias: Tensor,
    /// `||dY - Q(dY)||_2` when grad-out quantization is active.
    pub grad_out_error: Option<f64>,
}

/// `Y = X W^T + b` for `X: [tokens, in]`, `W: [out, in]`, `b: [out]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (tokens, din, dout) = linear_dims(x, w, bias)?;
    let mut y = vec![0.0; tokens * dout];
    kernels::gemm(tokens, din, dout, 1.0, x.data(), false, w.data(), true, 0.0, &mut y);
    for row in y.chunks_mut(dout) {
        for (o, b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Tensor::new(y, &[tokens, dout])
}

/// Backward of [`linear_forward`] given the operands actually used in forward.
pub fn linear_backward(
    dy: &Tensor,
    x_used: &Tensor,
    w_used: &Tensor,
    grad_out_q: Option<&QuantConfig>,
    quantize_dx_path: bool,
) -> Result<LinearGrads> {
    let (tokens, din) = (x_used.shape()[0], x_used.shape()[1]);
    let dout = w_used.shape()[0];
    if dy.shape() != [tokens, dout] {
        return shape_err(format!("dY {:?} for output [{tokens}, {dout}]", dy.shape()));
    }
    let (qdy, grad_out_error) = match grad_out_q {
        Some(cfg) => {
            let q = fake_quantize_tensor(dy, cfg)?;
            let err = dy
                .data()
                .iter()
                .zip(q.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            (Some(q), Some(err))
        }
        None => (None, None),
    };
    let dy_for_w = qdy.as_ref().unwrap_or(dy);
    let dy_for_x = if quantize_dx_path { dy_for_w } else { dy };

    let dx = kernels::matmul(tokens, dout, din, dy_for_x.data(), false, w_used.data(), false);
    let dw = kernels::matmul(dout, tokens, din, dy_for_w.data(), true, x_used.data(), false);
    let dbias = kernels::col_sums(dy.data(), dout);
    Ok(LinearGrads {
        dx: Tensor::new(dx, &[tokens, din])?,
        dw: Tensor::new(dw, &[dout, din])?,
        dbias: Tensor::new(dbias, &[dout])?,
        grad_out_error,
    })
}

fn linear_dims(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() != 2 || w.rank() != 2 {
        return shape_err(format!("linear needs matrices, got x {:?} w {:?}", x.shape(), w.shape()));
    }
    let (tokens, din) = (x.shape()[0], x.shape()[1]);
    let (dout, din_w) = (w.shape()[0], w.shape()[1]);
    if din != din_w || bias.shape() != [dout] {
        return shape_err(format!(
            "linear x {:?} w {:?} bias {:?}",
            x.shape(),
            w.shape(),
            bias.shape()
        ));
    }
    Ok((tokens, din, dout))
}

struct Saved {
    x_used: Tensor,
    w_used: Tensor,
}

/// Standalone quantized linear layer holding its own operands.
///
/// The model builds the same computation inside an autodiff graph with
/// [`qlinear_node`]; this type exposes the forward/backward contract directly.
pub struct QLinear {
    pub weight: Tensor,
    pub bias: Tensor,
    spec: LayerQuantSpec,
    pub quantize_dx_path: bool,
    saved: Option<Saved>,
}

impl QLinear {
    pub fn new(weight: Tensor, bias: Tensor, spec: LayerQuantSpec) -> Result<Self> {
        spec.validate()?;
        if weight.rank() != 2 || bias.shape() != [weight.shape()[0]] {
            return shape_err(format!("weight {:?} bias {:?}", weight.shape(), bias.shape()));
        }
        Ok(Self {
            weight,
            bias,
            spec,
            quantize_dx_path: false,
            saved: None,
        })
    }

    pub fn spec(&self) -> &LayerQuantSpec {
        &self.spec
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        x.expect_finite("linear input")?;
        linear_dims(x, &self.weight, &self.bias)?;
        let x_used = match &self.spec.activation {
            Some(cfg) => fake_quantize_tensor(x, cfg)?,
            None => x.clone(),
        };
        let w_used = match &self.spec.weight {
            Some(cfg) => fake_quantize_tensor(&self.weight, cfg)?,
            None => self.weight.clone(),
        };
        let y = linear_forward(&x_used, &w_used, &self.bias)?;
        self.saved = Some(Saved { x_used, w_used });
        Ok(y)
    }

    /// Returns `(dX, dW, dbias)`; the STE makes these the gradients of the
    /// raw input and raw weight.
    pub fn backward(&self, dy: &Tensor) -> Result<LinearGrads> {
        let saved = self
            .saved
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        linear_backward(
            dy,
            &saved.x_used,
            &saved.w_used,
            self.spec.grad_out.as_ref(),
            self.quantize_dx_path,
        )
    }
}

/// Graph options for one quantized linear node.
#[derive(Clone, Default)]
pub struct QLinearNode<'a> {
    pub name: &'a str,
    pub spec: LayerQuantSpec,
    pub quantize_dx_path: bool,
    pub errors: Option<GradOutErrors>,
}

/// Adds a quantized linear layer to `g`: `x: [tokens, in]`, `w: [out, in]`, `bias: [out]`.
pub fn qlinear_node(g: &mut Graph, x: Var, w: Var, bias: Var, opts: &QLinearNode<'_>) -> Result<Var> {
    g.value(x).expect_finite(opts.name)?;
    let x_used = match &opts.spec.activation {
        Some(cfg) => fake_quantize(g, x, cfg)?,
        None => x,
    };
    let w_used = match &opts.spec.weight {
        Some(cfg) => fake_quantize(g, w, cfg)?,
        None => w,
    };
    let value = linear_forward(g.value(x_used), g.value(w_used), g.value(bias))?;

    let grad_out_q = opts.spec.grad_out;
    let quantize_dx_path = opts.quantize_dx_path;
    let errors = opts.errors.clone();
    let name = opts.name.to_string();
    g.custom_grad(
        value,
        &[x_used, w_used, bias],
        Box::new(move |dy, parents| {
            let grads = linear_backward(dy, parents[0], parents[1], grad_out_q.as_ref(), quantize_dx_path)?;
            if let (Some(sink), Some(err)) = (&errors, grads.grad_out_error) {
                sink.record(&name, err * err);
            }
            Ok(vec![Some(grads.dx), Some(grads.dw), Some(grads.dbias)])
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::random_tensor;
    use crate::quant::QuantMode;

    fn cfg(bits: u8, g: Granularity) -> QuantConfig {
        QuantConfig::symmetric(bits, g).unwrap()
    }

    #[test]
    fn weight_quantized_forward_example() {
        let w = Tensor::from_rows(&[&[1.0, -0.5]]).unwrap();
        let spec = LayerQuantSpec {
            weight: Some(cfg(8, Granularity::PerTensor)),
            ..Default::default()
        };
        let mut layer = QLinear::new(w, Tensor::zeros(&[1]), spec).unwrap();
        let y = layer.forward(&Tensor::from_rows(&[&[0.4, 0.4]]).unwrap()).unwrap();
        let expected = 0.4 * 1.0 + 0.4 * (-64.0 / 127.0);
        assert!((y.data()[0] - expected).abs() < 1e-15);
        assert!((y.data()[0] - 0.19843).abs() < 1e-5);
    }

    #[test]
    fn asymmetric_activation_forward_example() {
        let eye = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let spec = LayerQuantSpec {
            activation: Some(QuantConfig::new(4, Granularity::PerTensor, QuantMode::Asymmetric).unwrap()),
            ..Default::default()
        };
        let mut layer = QLinear::new(eye, Tensor::zeros(&[2]), spec).unwrap();
        let y = layer.forward(&Tensor::from_rows(&[&[0.2, 1.0]]).unwrap()).unwrap();
        assert!((y.data()[0] - 0.142857).abs() < 1e-6);
        assert!((y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grad_out_quantization_example() {
        let spec = LayerQuantSpec {
            grad_out: Some(cfg(8, Granularity::PerTensor)),
            ..Default::default()
        };
        let w = Tensor::from_rows(&[&[0.7], &[-0.3]]).unwrap();
        let mut layer = QLinear::new(w, Tensor::zeros(&[2]), spec).unwrap();
        layer.forward(&Tensor::from_rows(&[&[2.0]]).unwrap()).unwrap();
        let grads = layer.backward(&Tensor::from_rows(&[&[1.0, 0.25]]).unwrap()).unwrap();
        assert_eq!(grads.dw.shape(), &[2, 1]);
        assert!((grads.dw.data()[0] - 2.0).abs() < 1e-15);
        assert!((grads.dw.data()[1] - 2.0 * 32.0 / 127.0).abs() < 1e-15);
        assert!((grads.dw.data()[1] - 0.503937).abs() < 1e-6);
        // dX never sees the quantizer
        assert_eq!(grads.dx.data(), &[1.0 * 0.7 + 0.25 * -0.3]);
        assert_eq!(grads.dbias.data(), &[1.0, 0.25]);
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let layer = QLinear::new(Tensor::zeros(&[2, 2]), Tensor::zeros(&[2]), LayerQuantSpec::none()).unwrap();
        assert!(matches!(layer.backward(&Tensor::zeros(&[1, 2])), Err(Error::State(_))));
    }

    #[test]
    fn spec_validation() {
        let bad_weight = LayerQuantSpec {
            weight: Some(cfg(8, Granularity::PerToken)),
            ..Default::default()
        };
        assert!(bad_weight.validate().is_err());
        let bad_grad = LayerQuantSpec {
            grad_out: Some(cfg(8, Granularity::PerChannel { axis: 1 })),
            ..Default::default()
        };
        assert!(bad_grad.validate().is_err());
        let bad_axis = LayerQuantSpec {
            activation: Some(cfg(8, Granularity::PerChannel { axis: 2 })),
            ..Default::default()
        };
        assert!(bad_axis.validate().is_err());
        let ok = LayerQuantSpec {
            weight: Some(cfg(4, Granularity::PerChannel { axis: 0 })),
            activation: Some(cfg(8, Granularity::PerChannel { axis: 1 })),
            grad_out: Some(cfg(8, Granularity::PerToken)),
        };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn node_matches_standalone_layer() {
        let spec = LayerQuantSpec {
            weight: Some(cfg(4, Granularity::PerChannel { axis: 0 })),
            activation: Some(cfg(8, Granularity::PerToken)),
            grad_out: Some(cfg(4, Granularity::PerToken)),
        };
        let x0 = random_tensor(&[5, 3], 1, 1.0);
        let w0 = random_tensor(&[4, 3], 2, 1.0);
        let b0 = random_tensor(&[4], 3, 1.0);
        let dy = random_tensor(&[5, 4], 4, 1.0);

        let mut layer = QLinear::new(w0.clone(), b0.clone(), spec).unwrap();
        let y_ref = layer.forward(&x0).unwrap();
        let grads_ref = layer.backward(&dy).unwrap();

        let errors = GradOutErrors::new();
        let mut g = Graph::new();
        let x = g.leaf(x0, true);
        let w = g.leaf(w0, true);
        let b = g.leaf(b0, true);
        let opts = QLinearNode {
            name: "probe",
            spec,
            quantize_dx_path: false,
            errors: Some(errors.clone()),
        };
        let y = qlinear_node(&mut g, x, w, b, &opts).unwrap();
        assert_eq!(g.value(y), &y_ref);
        let grads = g.backward_with(y, dy).unwrap();
        assert_eq!(grads.get(x).unwrap(), &grads_ref.dx);
        assert_eq!(grads.get(w).unwrap(), &grads_ref.dw);
        assert_eq!(grads.get(b).unwrap(), &grads_ref.dbias);
        let norms = errors.norms();
        assert!((norms["probe"] - grads_ref.grad_out_error.unwrap()).abs() < 1e-15);
    }
}
