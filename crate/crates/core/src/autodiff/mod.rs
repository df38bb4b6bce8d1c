//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in creation order, which is a topological order, so
//! [`Graph::backward`] walks the node list once in reverse. Gradients arriving
//! at a node along several paths are summed.
//!
//! Custom backward rules ([`Graph::custom_grad`]) let callers attach a forward
//! value computed elsewhere and supply their own gradient map; the
//! straight-through estimator and the quantized linear layer are built on it.

pub mod gradcheck;
pub mod kernels;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps the upstream gradient and the parents' forward values to one optional
/// gradient per parent (`None` means no contribution).
pub type BackwardRule = Box<dyn Fn(&Tensor, &[&Tensor]) -> Result<Vec<Option<Tensor>>>>;

enum Op {
    Leaf,
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Transpose(Var),
    Reshape(Var),
    Permute0213(Var),
    NarrowCols { x: Var, start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Gelu { x: Var, tanh: Vec<f64> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    CausalMask(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    SumAll(Var),
    Custom { parents: Vec<Var>, rule: BackwardRule },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::AddRowBias(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Permute0213(x)
            | Op::Softmax(x)
            | Op::CausalMask(x)
            | Op::SumAll(x) => vec![*x],
            Op::NarrowCols { x, .. } | Op::Gelu { x, .. } => vec![*x],
            Op::GatherRows { table, .. } => vec![*table],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Custom { parents, .. } => parents.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn expect_rank(t: &Tensor, rank: usize, op: &str) -> Result<()> {
    if t.rank() != rank {
        return shape_err(format!("{op}: expected rank {rank}, got {:?}", t.shape()));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds a length-`n` vector to every row of a `[.., n]` tensor.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, cols) = xv.rows_cols();
        if bv.shape() != [cols] {
            return shape_err(format!("bias {:?} for rows of {}", bv.shape(), cols));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRowBias(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        expect_rank(av, 2, "matmul")?;
        expect_rank(bv, 2, "matmul")?;
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, n) = (bv.shape()[0], bv.shape()[1]);
        if k != k2 {
            return shape_err(format!("matmul {:?} x {:?}", av.shape(), bv.shape()));
        }
        let c = kernels::matmul(m, k, n, av.data(), false, bv.data(), false);
        let value = Tensor::new(c, &[m, n])?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Batched matmul of `[batch, m, k]` by `[batch, k, n]`, or by
    /// `[batch, n, k]` transposed when `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        expect_rank(av, 3, "batch_matmul")?;
        expect_rank(bv, 3, "batch_matmul")?;
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (kb, n) = if transpose_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if bv.shape()[0] != batch || kb != k {
            return shape_err(format!(
                "batch_matmul {:?} x {:?} (transpose_b={transpose_b})",
                av.shape(),
                bv.shape()
            ));
        }
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                1.0,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                transpose_b,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::new(out, &[batch, m, n])?;
        Ok(self.push(value, Op::BatchMatMul { a, b, transpose_b }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        expect_rank(xv, 2, "transpose")?;
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let value = Tensor::new(transpose2d(r, c, xv.data()), &[c, r])?;
        Ok(self.push(value, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Swaps the middle two axes of a rank-4 tensor: `[a, b, c, d] -> [a, c, b, d]`.
    pub fn permute_0213(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        expect_rank(xv, 4, "permute_0213")?;
        let s = xv.shape();
        let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
        let value = Tensor::new(permute0213(a, b, c, d, xv.data()), &[a, c, b, d])?;
        Ok(self.push(value, Op::Permute0213(x)))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        expect_rank(xv, 2, "narrow_cols")?;
        let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
        if start + len > cols {
            return shape_err(format!("narrow_cols {start}+{len} > {cols}"));
        }
        let mut out = Vec::with_capacity(rows * len);
        for row in xv.data().chunks(cols) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(out, &[rows, len])?;
        Ok(self.push(value, Op::NarrowCols { x, start }))
    }

    /// Selects rows of a `[n, d]` table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        expect_rank(tv, 2, "gather_rows")?;
        let (n, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::Data(format!("row id {id} out of range for {n} rows")));
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(out, &[ids.len(), d])?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let tanh: Vec<f64> = xv.data().iter().map(|&v| kernels::gelu_tanh(v)).collect();
        let data = xv.data().iter().zip(&tanh).map(|(&v, &t)| 0.5 * v * (1.0 + t)).collect();
        let value = Tensor::new(data, xv.shape()).expect("same shape");
        self.push(value, Op::Gelu { x, tanh })
    }

    /// Normalizes each row of `[.., d]` to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (_, d) = xv.rows_cols();
        if d == 0 || gv.shape() != [d] || bv.shape() != [d] {
            return shape_err(format!(
                "layernorm over {d} with gain {:?} bias {:?}",
                gv.shape(),
                bv.shape()
            ));
        }
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(xv.len() / d);
        for ((row, o), h) in xv
            .data()
            .chunks(d)
            .zip(out.chunks_mut(d))
            .zip(xhat.chunks_mut(d))
        {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                h[j] = (row[j] - mean) * r;
                o[j] = h[j] * gv.data()[j] + bv.data()[j];
            }
            rstd.push(r);
        }
        let value = Tensor::new(out, xv.shape())?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let (_, cols) = value.rows_cols();
        if cols > 0 {
            kernels::softmax_rows(value.data_mut(), cols);
        }
        self.push(value, Op::Softmax(x))
    }

    /// Sets entries above the diagonal of each trailing `[t, t]` block to -inf.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return shape_err(format!("causal_mask needs [.., t, t], got {s:?}"));
        }
        let t = s[s.len() - 1];
        let mut value = xv.clone();
        for block in value.data_mut().chunks_mut(t * t) {
            for i in 0..t {
                for v in &mut block[i * t + i + 1..(i + 1) * t] {
                    *v = f64::NEG_INFINITY;
                }
            }
        }
        Ok(self.push(value, Op::CausalMask(x)))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[tokens, vocab]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        expect_rank(lv, 2, "cross_entropy")?;
        let (rows, vocab) = (lv.shape()[0], lv.shape()[1]);
        if targets.len() != rows || rows == 0 {
            return shape_err(format!("{} targets for {rows} rows", targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Data(format!("target {bad} out of range for vocab {vocab}")));
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        for (row, &t) in probs.chunks_mut(vocab).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let value = Tensor::scalar(total / rows as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x))
    }

    /// Attaches `value` as a node whose gradient with respect to `parents` is
    /// given by `rule` instead of any built-in derivative.
    pub fn custom_grad(&mut self, value: Tensor, parents: &[Var], rule: BackwardRule) -> Result<Var> {
        if let Some(p) = parents.iter().find(|p| p.0 >= self.nodes.len()) {
            return Err(Error::State(format!("unknown parent node {}", p.0)));
        }
        Ok(self.push(
            value,
            Op::Custom {
                parents: parents.to_vec(),
                rule,
            },
        ))
    }

    /// Backpropagates from a scalar node with seed gradient 1.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return shape_err(format!(
                "backward() needs a scalar root, got {:?}",
                self.value(root).shape()
            ));
        }
        let seed = Tensor::full(self.value(root).shape(), 1.0);
        self.backward_with(root, seed)
    }

    /// Backpropagates an explicit upstream gradient from `root`.
    pub fn backward_with(&self, root: Var, upstream: Tensor) -> Result<Gradients> {
        upstream.expect_same_shape(self.value(root))?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(upstream);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let contributions = self.node_backward(node, &dy)?;
            for (parent, g) in node.op.parents().into_iter().zip(contributions) {
                let Some(g) = g else { continue };
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                if g.shape() != self.nodes[parent.0].value.shape() {
                    return shape_err(format!(
                        "backward produced gradient {:?} for parent of shape {:?}",
                        g.shape(),
                        self.nodes[parent.0].value.shape()
                    ));
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, dy: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(_, _) => vec![Some(dy.clone()), Some(dy.clone())],
            Op::AddRowBias(_, b) => {
                let cols = val(*b).len();
                vec![
                    Some(dy.clone()),
                    Some(Tensor::new(kernels::col_sums(dy.data(), cols), &[cols])?),
                ]
            }
            Op::Mul(a, b) => vec![
                Some(dy.zip_map(val(*b), |g, y| g * y)?),
                Some(dy.zip_map(val(*a), |g, x| g * x)?),
            ],
            Op::Scale(_, c) => vec![Some(dy.map(|g| g * c))],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let da = wants(*a)
                    .then(|| Tensor::new(kernels::matmul(m, n, k, dy.data(), false, bv.data(), true), &[m, k]))
                    .transpose()?;
                let db = wants(*b)
                    .then(|| Tensor::new(kernels::matmul(k, m, n, av.data(), true, dy.data(), false), &[k, n]))
                    .transpose()?;
                vec![da, db]
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = dy.shape()[2];
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for i in 0..batch {
                    let a_i = &av.data()[i * m * k..(i + 1) * m * k];
                    let b_i = &bv.data()[i * k * n..(i + 1) * k * n];
                    let g_i = &dy.data()[i * m * n..(i + 1) * m * n];
                    // dA = dC * op(B)^T
                    kernels::gemm(m, n, k, 1.0, g_i, false, b_i, !transpose_b, 0.0, &mut da[i * m * k..(i + 1) * m * k]);
                    let db_i = &mut db[i * k * n..(i + 1) * k * n];
                    if *transpose_b {
                        // B stored [n, k]: dB = dC^T * A
                        kernels::gemm(n, m, k, 1.0, g_i, true, a_i, false, 0.0, db_i);
                    } else {
                        kernels::gemm(k, m, n, 1.0, a_i, true, g_i, false, 0.0, db_i);
                    }
                }
                vec![
                    Some(Tensor::new(da, av.shape())?),
                    Some(Tensor::new(db, bv.shape())?),
                ]
            }
            Op::Transpose(_) => {
                let (r, c) = (dy.shape()[0], dy.shape()[1]);
                vec![Some(Tensor::new(transpose2d(r, c, dy.data()), &[c, r])?)]
            }
            Op::Reshape(x) => vec![Some(dy.clone().reshape(val(*x).shape())?)],
            Op::Permute0213(x) => {
                let s = dy.shape();
                let g = permute0213(s[0], s[1], s[2], s[3], dy.data());
                vec![Some(Tensor::new(g, val(*x).shape())?)]
            }
            Op::NarrowCols { x, start } => {
                let xv = val(*x);
                let cols = xv.shape()[1];
                let len = dy.shape()[1];
                let mut g = vec![0.0; xv.len()];
                for (grow, drow) in g.chunks_mut(cols).zip(dy.data().chunks(len)) {
                    grow[*start..*start + len].copy_from_slice(drow);
                }
                vec![Some(Tensor::new(g, xv.shape())?)]
            }
            Op::GatherRows { table, ids } => {
                let tv = val(*table);
                let d = tv.shape()[1];
                let mut g = vec![0.0; tv.len()];
                for (&id, drow) in ids.iter().zip(dy.data().chunks(d)) {
                    for (acc, v) in g[id * d..(id + 1) * d].iter_mut().zip(drow) {
                        *acc += v;
                    }
                }
                vec![Some(Tensor::new(g, tv.shape())?)]
            }
            Op::Gelu { x, tanh } => {
                let g = dy
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .zip(tanh)
                    .map(|((&g, &v), &t)| g * kernels::gelu_grad_from_tanh(v, t))
                    .collect();
                vec![Some(Tensor::new(g, dy.shape())?)]
            }
            Op::LayerNorm {
                gain, xhat, rstd, ..
            } => {
                let gv = val(*gain);
                let d = gv.len();
                let mut dx = vec![0.0; dy.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, ((drow, hrow), dxrow)) in dy
                    .data()
                    .chunks(d)
                    .zip(xhat.chunks(d))
                    .zip(dx.chunks_mut(d))
                    .enumerate()
                {
                    let (mut mean_dxhat, mut mean_dxhat_xhat) = (0.0, 0.0);
                    for j in 0..d {
                        dxhat[j] = drow[j] * gv.data()[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * hrow[j];
                        dgain[j] += drow[j] * hrow[j];
                        dbias[j] += drow[j];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for j in 0..d {
                        dxrow[j] = rstd[r] * (dxhat[j] - mean_dxhat - hrow[j] * mean_dxhat_xhat);
                    }
                }
                vec![
                    Some(Tensor::new(dx, dy.shape())?),
                    Some(Tensor::new(dgain, &[d])?),
                    Some(Tensor::new(dbias, &[d])?),
                ]
            }
            Op::Softmax(_) => {
                let y = &node.value;
                let (_, cols) = y.rows_cols();
                let mut dx = vec![0.0; y.len()];
                for ((yrow, grow), out) in y
                    .data()
                    .chunks(cols)
                    .zip(dy.data().chunks(cols))
                    .zip(dx.chunks_mut(cols))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        out[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                vec![Some(Tensor::new(dx, y.shape())?)]
            }
            Op::CausalMask(_) => {
                let t = *dy.shape().last().expect("rank checked in forward");
                let mut g = dy.clone();
                for block in g.data_mut().chunks_mut(t * t) {
                    for i in 0..t {
                        for v in &mut block[i * t + i + 1..(i + 1) * t] {
                            *v = 0.0;
                        }
                    }
                }
                vec![Some(g)]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lv = val(*logits);
                let vocab = lv.shape()[1];
                let scale = dy.item()? / targets.len() as f64;
                let mut g = probs.clone();
                for (row, &t) in g.chunks_mut(vocab).zip(targets) {
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                vec![Some(Tensor::new(g, lv.shape())?)]
            }
            Op::SumAll(x) => vec![Some(Tensor::full(val(*x).shape(), dy.item()?))],
            Op::Custom { parents, rule } => {
                let values: Vec<&Tensor> = parents.iter().map(|p| val(*p)).collect();
                let out = rule(dy, &values)?;
                if out.len() != parents.len() {
                    return Err(Error::Shape(format!(
                        "custom rule returned {} gradients for {} parents",
                        out.len(),
                        parents.len()
                    )));
                }
                out
            }
        };
        Ok(out)
    }
}

fn transpose2d(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

fn permute0213(a: usize, b: usize, c: usize, d: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}
