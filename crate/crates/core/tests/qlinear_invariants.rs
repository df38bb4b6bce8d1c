use proptest::prelude::*;
use qptrain::autodiff::Graph;
use qptrain::qlinear::{linear_forward, qlinear_node, LayerQuantSpec, QLinear, QLinearNode};
use qptrain::quant::{fake_quantize_tensor, Granularity, QuantConfig};
use qptrain::Tensor;

fn mat(r: usize, c: usize, seed: u64) -> Tensor {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..r * c)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    Tensor::new(data, &[r, c]).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[1];
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|p| a.data()[i * k + p] * b.data()[p * m + j]).sum();
        }
    }
    out
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut d = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            d[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(d, &[c, r]).unwrap()
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + y.abs()))
}

fn spec(w: Option<u8>, a: Option<u8>, g: Option<u8>) -> LayerQuantSpec {
    let q = |bits: Option<u8>, gr| bits.map(|b| QuantConfig::symmetric(b, gr).unwrap());
    LayerQuantSpec {
        weight: q(w, Granularity::PerChannel { axis: 0 }),
        activation: q(a, Granularity::PerToken),
        grad_out: q(g, Granularity::PerToken),
    }
}

proptest! {
    #[test]
    fn gradients_follow_the_backward_contract(
        tokens in 1usize..6, din in 1usize..6, dout in 1usize..6, seed in any::<u64>(),
        w in prop::option::of(2u8..=8), a in prop::option::of(2u8..=8), g in prop::option::of(2u8..=8),
    ) {
        let s = spec(w, a, g);
        let (x, wt, b, dy) = (mat(tokens, din, seed), mat(dout, din, seed + 1), mat(1, dout, seed + 2), mat(tokens, dout, seed + 3));
        let b = b.reshape(&[dout]).unwrap();
        let mut layer = QLinear::new(wt.clone(), b.clone(), s).unwrap();
        let y = layer.forward(&x).unwrap();
        let x_used = s.activation.map_or(x.clone(), |c| fake_quantize_tensor(&x, &c).unwrap());
        let w_used = s.weight.map_or(wt.clone(), |c| fake_quantize_tensor(&wt, &c).unwrap());
        let mut expected_y = naive_matmul(&x_used, &transpose(&w_used));
        for row in expected_y.chunks_mut(dout) {
            row.iter_mut().zip(b.data()).for_each(|(o, bb)| *o += bb);
        }
        prop_assert!(close(y.data(), &expected_y));

        let grads = layer.backward(&dy).unwrap();
        let qdy = s.grad_out.map_or(dy.clone(), |c| fake_quantize_tensor(&dy, &c).unwrap());
        prop_assert!(close(grads.dx.data(), &naive_matmul(&dy, &w_used)));
        prop_assert!(close(grads.dw.data(), &naive_matmul(&transpose(&qdy), &x_used)));
        let col: Vec<f64> = (0..dout).map(|j| (0..tokens).map(|i| dy.data()[i * dout + j]).sum()).collect();
        prop_assert!(close(grads.dbias.data(), &col));
        prop_assert_eq!(grads.grad_out_error.is_some(), g.is_some());
    }

    #[test]
    fn graph_node_matches_standalone_layer(
        tokens in 1usize..5, din in 1usize..5, dout in 1usize..5, seed in any::<u64>(),
        w in prop::option::of(2u8..=8), a in prop::option::of(2u8..=8), g in prop::option::of(2u8..=8),
    ) {
        let s = spec(w, a, g);
        let (x, wt, dy) = (mat(tokens, din, seed), mat(dout, din, seed + 1), mat(tokens, dout, seed + 2));
        let b = Tensor::zeros(&[dout]);
        let mut layer = QLinear::new(wt.clone(), b.clone(), s).unwrap();
        let y = layer.forward(&x).unwrap();
        let lg = layer.backward(&dy).unwrap();

        let mut graph = Graph::new();
        let (xv, wv, bv) = (graph.leaf(x, true), graph.leaf(wt, true), graph.leaf(b, true));
        let out = qlinear_node(&mut graph, xv, wv, bv, &QLinearNode { name: "l", spec: s, ..Default::default() }).unwrap();
        prop_assert_eq!(graph.value(out), &y);
        let mut gr = graph.backward_with(out, dy).unwrap();
        prop_assert_eq!(gr.take(xv).unwrap(), lg.dx);
        prop_assert_eq!(gr.take(wv).unwrap(), lg.dw);
        prop_assert_eq!(gr.take(bv).unwrap(), lg.dbias);
    }
}

#[test]
fn unquantized_layer_is_plain_linear() {
    let (x, w, b) = (mat(4, 3, 1), mat(2, 3, 2), Tensor::vector(&[0.5, -1.0]));
    let mut layer = QLinear::new(w.clone(), b.clone(), LayerQuantSpec::none()).unwrap();
    assert_eq!(layer.forward(&x).unwrap(), linear_forward(&x, &w, &b).unwrap());
}

#[test]
fn quantizing_the_input_path_changes_only_dx() {
    let (x, w, dy) = (mat(6, 4, 3), mat(5, 4, 4), mat(6, 5, 5));
    let s = spec(None, None, Some(2));
    let mut plain = QLinear::new(w.clone(), Tensor::zeros(&[5]), s).unwrap();
    let mut dx_path = QLinear::new(w, Tensor::zeros(&[5]), s).unwrap();
    dx_path.quantize_dx_path = true;
    plain.forward(&x).unwrap();
    dx_path.forward(&x).unwrap();
    let (a, b) = (plain.backward(&dy).unwrap(), dx_path.backward(&dy).unwrap());
    assert_eq!(a.dw, b.dw);
    assert_eq!(a.dbias, b.dbias);
    assert_ne!(a.dx, b.dx);
}

#[test]
fn backward_before_forward_is_an_error() {
    let layer = QLinear::new(mat(2, 2, 1), Tensor::zeros(&[2]), LayerQuantSpec::none()).unwrap();
    assert!(layer.backward(&mat(1, 2, 2)).is_err());
}
