//! A small GPT-2-style decoder-only transformer.
//!
//! Pre-LN blocks, causal multi-head self-attention, tanh-GELU MLP and a
//! language-model head tied to the token embedding. The four linear families
//! of every block (`qkv`, `attn_out`, `fc1`, `fc2`) are quantized linear
//! layers driven by [`FamilyQuant`].
//!
//! Parameter count for `L` layers, width `d`, MLP width `f`, vocabulary `V`
//! and context `T` with a tied head:
//!
//! ```text
//! V*d + T*d + L*(4d^2 + 2*d*f + 9d + f) + 2d        (f = 4d: 12d^2 + 13d per layer)
//! ```
//!
//! An untied head adds `V*d`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::qlinear::{qlinear_node, GradOutErrors, LayerQuantSpec, QLinearNode};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// The linear families inside each block.
pub const FAMILIES: [&str; 4] = ["qkv", "attn_out", "fc1", "fc2"];

/// Quantization spec per linear family, plus the (normally unquantized) head.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FamilyQuant {
    #[serde(default)]
    pub qkv: LayerQuantSpec,
    #[serde(default)]
    pub attn_out: LayerQuantSpec,
    #[serde(default)]
    pub fc1: LayerQuantSpec,
    #[serde(default)]
    pub fc2: LayerQuantSpec,
    #[serde(default)]
    pub lm_head: LayerQuantSpec,
}

impl FamilyQuant {
    /// The same spec on all four block families; the head stays unquantized.
    pub fn uniform(spec: LayerQuantSpec) -> Self {
        Self {
            qkv: spec,
            attn_out: spec,
            fc1: spec,
            fc2: spec,
            lm_head: LayerQuantSpec::none(),
        }
    }

    pub fn family(&self, name: &str) -> Option<&LayerQuantSpec> {
        match name {
            "qkv" => Some(&self.qkv),
            "attn_out" => Some(&self.attn_out),
            "fc1" => Some(&self.fc1),
            "fc2" => Some(&self.fc2),
            "lm_head" => Some(&self.lm_head),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for spec in [&self.qkv, &self.attn_out, &self.fc1, &self.fc2, &self.lm_head] {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn is_disabled(&self) -> bool {
        [&self.qkv, &self.attn_out, &self.fc1, &self.fc2, &self.lm_head]
            .iter()
            .all(|s| s.is_disabled())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    pub tie_lm_head: bool,
    pub quant: FamilyQuant,
    /// Also quantize the grad-out used for input gradients (instability demo).
    pub quantize_dx_path: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// The desk-scale configuration: 2 layers, width 128, 4 heads, context 128, byte vocab.
    pub fn toy() -> Self {
        Self {
            n_layers: 2,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: crate::data::VOCAB_SIZE,
            context_length: 128,
            tie_lm_head: true,
            quant: FamilyQuant::default(),
            quantize_dx_path: false,
        }
    }

    /// GPT-2 small dimensions (12 layers, width 768, vocab 50257, context 1024).
    pub fn gpt2_small() -> Self {
        Self {
            n_layers: 12,
            d_model: 768,
            n_heads: 12,
            d_ff: 3072,
            vocab_size: 50257,
            context_length: 1024,
            tie_lm_head: true,
            quant: FamilyQuant::default(),
            quantize_dx_path: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("model dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.context_length == 0 {
            return bad("context_length must be at least 1".into());
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2".into());
        }
        self.quant.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count (see module docs).
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        let per_layer = 4 * d * d + 2 * d * f + 9 * d + f;
        let head = if self.tie_lm_head { 0 } else { self.vocab_size * d };
        self.vocab_size * d + self.context_length * d + self.n_layers * per_layer + 2 * d + head
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether weight decay applies (matrices and embeddings).
    pub decay: bool,
}

#[derive(Debug, Clone)]
struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

/// Token ids laid out as `batch` rows of `cols` entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBlock {
    pub batch: usize,
    pub cols: usize,
    pub ids: Vec<u32>,
}

impl TokenBlock {
    pub fn new(batch: usize, cols: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != batch * cols {
            return Err(Error::Shape(format!(
                "{} ids for a {batch}x{cols} block",
                ids.len()
            )));
        }
        Ok(Self { batch, cols, ids })
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.cols..(i + 1) * self.cols]
    }

    /// Splits `[B, T+1]` into inputs `[B, T]` and shifted targets.
    pub fn split_targets(&self) -> Result<(TokenBlock, Vec<usize>)> {
        if self.cols < 2 {
            return Err(Error::Data("need at least 2 tokens per row for a loss".into()));
        }
        let t = self.cols - 1;
        let mut inputs = Vec::with_capacity(self.batch * t);
        let mut targets = Vec::with_capacity(self.batch * t);
        for b in 0..self.batch {
            let row = self.row(b);
            inputs.extend_from_slice(&row[..t]);
            targets.extend(row[1..].iter().map(|&v| v as usize));
        }
        Ok((TokenBlock::new(self.batch, t, inputs)?, targets))
    }
}

/// Options for building one forward graph.
#[derive(Clone, Default)]
pub struct ForwardOptions {
    /// Record the input of every quantized linear layer under `block{i}.{family}`.
    pub capture: bool,
    /// Collect grad-out quantization error norms during backward.
    pub grad_out_errors: Option<GradOutErrors>,
    /// Use plain matmul/bias ops instead of quantized linear nodes (reference path).
    pub plain_linear: bool,
}

pub struct ForwardGraph {
    pub graph: Graph,
    pub params: Vec<Var>,
    pub logits: Var,
    pub captures: BTreeMap<String, Tensor>,
}

/// Loss, gradients and side outputs of one batch.
pub struct LossAndGrads {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub captures: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone)]
pub struct GptModel {
    config: ModelConfig,
    params: Vec<Param>,
    wte: usize,
    wpe: usize,
    blocks: Vec<BlockIdx>,
    lnf_g: usize,
    lnf_b: usize,
    lm_head: Option<usize>,
}

impl GptModel {
    /// Randomly initialized model: weights ~ N(0, 0.02), residual projections
    /// scaled by `1/sqrt(2L)`, zero biases, unit layer-norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let resid_std = INIT_STD / ((2 * config.n_layers) as f64).sqrt();
        let mut normal = |shape: &[usize], std: f64| -> Tensor {
            let dist = Normal::new(0.0, std).expect("positive std");
            let n = shape.iter().product();
            Tensor::new((0..n).map(|_| dist.sample(&mut rng)).collect(), shape)
                .expect("length matches shape")
        };

        let mut params = Vec::new();
        let push = |params: &mut Vec<Param>, name: String, value: Tensor, decay: bool| {
            params.push(Param { name, value, decay });
            params.len() - 1
        };
        let wte = push(&mut params, "wte".into(), normal(&[v, d], INIT_STD), true);
        let wpe = push(
            &mut params,
            "wpe".into(),
            normal(&[config.context_length, d], INIT_STD),
            true,
        );
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |s: &str| format!("h{i}.{s}");
            blocks.push(BlockIdx {
                ln1_g: push(&mut params, p("ln1.g"), Tensor::full(&[d], 1.0), false),
                ln1_b: push(&mut params, p("ln1.b"), Tensor::zeros(&[d]), false),
                qkv_w: push(&mut params, p("qkv.w"), normal(&[3 * d, d], INIT_STD), true),
                qkv_b: push(&mut params, p("qkv.b"), Tensor::zeros(&[3 * d]), false),
                proj_w: push(&mut params, p("attn_out.w"), normal(&[d, d], resid_std), true),
                proj_b: push(&mut params, p("attn_out.b"), Tensor::zeros(&[d]), false),
                ln2_g: push(&mut params, p("ln2.g"), Tensor::full(&[d], 1.0), false),
                ln2_b: push(&mut params, p("ln2.b"), Tensor::zeros(&[d]), false),
                fc1_w: push(&mut params, p("fc1.w"), normal(&[f, d], INIT_STD), true),
                fc1_b: push(&mut params, p("fc1.b"), Tensor::zeros(&[f]), false),
                fc2_w: push(&mut params, p("fc2.w"), normal(&[d, f], resid_std), true),
                fc2_b: push(&mut params, p("fc2.b"), Tensor::zeros(&[d]), false),
            });
        }
        let lnf_g = push(&mut params, "lnf.g".into(), Tensor::full(&[d], 1.0), false);
        let lnf_b = push(&mut params, "lnf.b".into(), Tensor::zeros(&[d]), false);
        let lm_head = (!config.tie_lm_head)
            .then(|| push(&mut params, "lm_head.w".into(), normal(&[v, d], INIT_STD), true));

        Ok(Self {
            config,
            params,
            wte,
            wpe,
            blocks,
            lnf_g,
            lnf_b,
            lm_head,
        })
    }

    /// Rebuilds a model from named tensors (e.g. a checkpoint).
    pub fn from_named(config: ModelConfig, named: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        for p in &mut model.params {
            let t = named
                .get(&p.name)
                .ok_or_else(|| Error::Data(format!("missing tensor {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "{}: stored {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces the per-family quantization specs (e.g. for post-hoc analysis).
    pub fn set_quant(&mut self, quant: FamilyQuant) -> Result<()> {
        quant.validate()?;
        self.config.quant = quant;
        Ok(())
    }

    /// Builds the forward graph for `tokens` using the given parameter nodes.
    pub fn build(
        &self,
        g: &mut Graph,
        params: &[Var],
        tokens: &TokenBlock,
        opts: &ForwardOptions,
    ) -> Result<(Var, BTreeMap<String, Tensor>)> {
        let cfg = &self.config;
        let (batch, t) = (tokens.batch, tokens.cols);
        if t == 0 || t > cfg.context_length {
            return Err(Error::Data(format!(
                "sequence length {t} outside 1..={}",
                cfg.context_length
            )));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::Data(format!(
                "token id {bad} out of range for vocab {}",
                cfg.vocab_size
            )));
        }
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} parameter nodes for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        let (d, h, hd) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let n = batch * t;
        let mut captures = BTreeMap::new();

        let ids: Vec<usize> = tokens.ids.iter().map(|&v| v as usize).collect();
        let positions: Vec<usize> = (0..n).map(|i| i % t).collect();
        let tok = g.gather_rows(params[self.wte], &ids)?;
        let pos = g.gather_rows(params[self.wpe], &positions)?;
        let mut x = g.add(tok, pos)?;

        let linear = |g: &mut Graph,
                          captures: &mut BTreeMap<String, Tensor>,
                          input: Var,
                          w: usize,
                          b: usize,
                          layer: usize,
                          family: &str|
         -> Result<Var> {
            let name = format!("block{layer}.{family}");
            if opts.capture {
                captures.insert(name.clone(), g.value(input).clone());
            }
            if opts.plain_linear {
                let wt = g.transpose(params[w])?;
                let y = g.matmul(input, wt)?;
                return g.add_row_bias(y, params[b]);
            }
            let spec = *cfg.quant.family(family).expect("known family");
            let node = QLinearNode {
                name: &name,
                spec,
                quantize_dx_path: cfg.quantize_dx_path,
                errors: opts.grad_out_errors.clone(),
            };
            qlinear_node(g, input, params[w], params[b], &node)
        };

        let attn_scale = 1.0 / (hd as f64).sqrt();
        for (li, blk) in self.blocks.iter().enumerate() {
            let hn = g.layernorm(x, params[blk.ln1_g], params[blk.ln1_b], LN_EPS)?;
            let qkv = linear(g, &mut captures, hn, blk.qkv_w, blk.qkv_b, li, "qkv")?;
            let mut heads = Vec::with_capacity(3);
            for part in 0..3 {
                let cols = g.narrow_cols(qkv, part * d, d)?;
                let r = g.reshape(cols, &[batch, t, h, hd])?;
                let p = g.permute_0213(r)?;
                heads.push(g.reshape(p, &[batch * h, t, hd])?);
            }
            let scores = g.batch_matmul(heads[0], heads[1], true)?;
            let scores = g.scale(scores, attn_scale);
            let masked = g.causal_mask(scores)?;
            let probs = g.softmax(masked);
            let ctx = g.batch_matmul(probs, heads[2], false)?;
            let ctx = g.reshape(ctx, &[batch, h, t, hd])?;
            let ctx = g.permute_0213(ctx)?;
            let ctx = g.reshape(ctx, &[n, d])?;
            let attn = linear(g, &mut captures, ctx, blk.proj_w, blk.proj_b, li, "attn_out")?;
            x = g.add(x, attn)?;

            let hn = g.layernorm(x, params[blk.ln2_g], params[blk.ln2_b], LN_EPS)?;
            let f1 = linear(g, &mut captures, hn, blk.fc1_w, blk.fc1_b, li, "fc1")?;
            let act = g.gelu(f1);
            let f2 = linear(g, &mut captures, act, blk.fc2_w, blk.fc2_b, li, "fc2")?;
            x = g.add(x, f2)?;
        }
        let xf = g.layernorm(x, params[self.lnf_g], params[self.lnf_b], LN_EPS)?;
        let head = params[self.lm_head.unwrap_or(self.wte)];
        let logits = if cfg.quant.lm_head.is_disabled() || opts.plain_linear {
            let ht = g.transpose(head)?;
            g.matmul(xf, ht)?
        } else {
            let zero_bias = g.leaf(Tensor::zeros(&[cfg.vocab_size]), false);
            let node = QLinearNode {
                name: "lm_head",
                spec: cfg.quant.lm_head,
                quantize_dx_path: cfg.quantize_dx_path,
                errors: opts.grad_out_errors.clone(),
            };
            qlinear_node(g, xf, head, zero_bias, &node)?
        };
        Ok((logits, captures))
    }

    pub fn forward_graph(&self, tokens: &TokenBlock, opts: &ForwardOptions) -> Result<ForwardGraph> {
        let mut graph = Graph::new();
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| graph.leaf(p.value.clone(), true))
            .collect();
        let (logits, captures) = self.build(&mut graph, &params, tokens, opts)?;
        Ok(ForwardGraph {
            graph,
            params,
            logits,
            captures,
        })
    }

    /// Logits `[B, T, vocab]`.
    pub fn forward(&self, tokens: &TokenBlock) -> Result<Tensor> {
        self.forward_with(tokens, &ForwardOptions::default())
    }

    pub fn forward_with(&self, tokens: &TokenBlock, opts: &ForwardOptions) -> Result<Tensor> {
        let fg = self.forward_graph(tokens, opts)?;
        fg.graph
            .value(fg.logits)
            .clone()
            .reshape(&[tokens.batch, tokens.cols, self.config.vocab_size])
    }

    /// Mean next-token cross-entropy over a `[B, T+1]` block.
    pub fn loss(&self, block: &TokenBlock) -> Result<f64> {
        let (inputs, targets) = block.split_targets()?;
        let mut fg = self.forward_graph(&inputs, &ForwardOptions::default())?;
        let loss = fg.graph.cross_entropy(fg.logits, &targets)?;
        fg.graph.value(loss).item()
    }

    pub fn loss_and_grads(&self, block: &TokenBlock, opts: &ForwardOptions) -> Result<LossAndGrads> {
        let (inputs, targets) = block.split_targets()?;
        let mut fg = self.forward_graph(&inputs, opts)?;
        let loss_var = fg.graph.cross_entropy(fg.logits, &targets)?;
        let loss = fg.graph.value(loss_var).item()?;
        if !loss.is_finite() {
            return Ok(LossAndGrads {
                loss,
                grads: Vec::new(),
                captures: fg.captures,
            });
        }
        let mut grads = fg.graph.backward(loss_var)?;
        let grads = fg
            .params
            .iter()
            .zip(&self.params)
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect();
        Ok(LossAndGrads {
            loss,
            grads,
            captures: fg.captures,
        })
    }

    /// Next token chosen greedily at every position.
    pub fn greedy_next(&self, tokens: &TokenBlock) -> Result<Vec<u32>> {
        let logits = self.forward(tokens)?;
        let v = self.config.vocab_size;
        Ok(logits
            .data()
            .chunks(v)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
                    .0 as u32
            })
            .collect())
    }

    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }
}
