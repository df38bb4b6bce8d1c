use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Args, Subcommand};
use serde::Serialize;

use qptrain::checkpoint::Checkpoint;
use qptrain::data::TokenizedCorpus;
use qptrain::diagnostics::{
    histogram, loss_surface_2d, outlier_report, sharpness_report, zero_bin_fraction, ModelObjective,
    DEFAULT_OUTLIER_K, DEFAULT_RHOS, DEFAULT_SHARPNESS_M,
};
use qptrain::model::{ForwardOptions, GptModel, TokenBlock};
use qptrain::optim::{moment_config, Moment, MomentKind};
use qptrain::quant::{quantize, Granularity, QuantConfig};
use qptrain::{Error, Tensor};

use crate::{load_corpus, write_file, OUT_DIR_ENV};

#[derive(Args)]
pub struct Common {
    #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
pub struct Windows {
    /// Prepared corpus; analyses use its validation split.
    #[arg(long)]
    corpus: PathBuf,
    /// Validation windows of `context_length + 1` tokens.
    #[arg(long)]
    windows: Option<usize>,
    /// Windows per forward pass.
    #[arg(long, default_value_t = 8)]
    chunk: usize,
}

#[derive(Subcommand)]
pub enum Analysis {
    /// Per-channel activation outliers of every quantized linear input
    /// (`outliers.json`). Several checkpoints give persistence across steps.
    Outliers {
        #[arg(long, num_args = 1.., required = true)]
        ckpt: Vec<PathBuf>,
        #[command(flatten)]
        windows: Windows,
        #[arg(long, default_value_t = DEFAULT_OUTLIER_K)]
        k: f64,
        /// Restrict to layers such as `block0.fc1`.
        #[arg(long)]
        layer: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// m-sharpness at several radii (`sharpness.json`).
    Sharpness {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        windows: Windows,
        #[arg(long, num_args = 1..)]
        rho: Vec<f64>,
        #[arg(long, default_value_t = DEFAULT_SHARPNESS_M)]
        m: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Filter-normalized 2-D loss surface (`surface.json`, `surface.csv`).
    Surface {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        windows: Windows,
        #[arg(long, default_value_t = 11)]
        res: usize,
        #[arg(long, default_value_t = 1.0)]
        extent: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Histogram of a parameter, or of a linear layer's input (`histogram.csv`).
    Histogram {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, conflicts_with = "activation")]
        param: Option<String>,
        /// Layer name such as `block1.fc2`; needs `--corpus`.
        #[arg(long)]
        activation: Option<String>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        windows: usize,
        #[arg(long, default_value_t = 64)]
        bins: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Zero-bin share of the optimizer moments (`zerobin.json`). Moments
    /// stored in full precision are quantized with `--bits`/`--granularity`.
    Zerobin {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "v")]
        moment: String,
        #[arg(long, default_value_t = 8)]
        bits: u8,
        #[arg(long, default_value = "tensor")]
        granularity: String,
        #[command(flatten)]
        common: Common,
    },
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

fn step_of(ckpt: &Checkpoint, fallback: u64) -> u64 {
    ckpt.extra.get("step").and_then(|s| s.as_u64()).unwrap_or(fallback)
}

fn val_windows(corpus: &TokenizedCorpus, model: &GptModel, max: usize) -> Result<Vec<Vec<u32>>> {
    let seq = model.config().context_length;
    let wins: Vec<Vec<u32>> = corpus.val_windows(seq, max).into_iter().map(<[u32]>::to_vec).collect();
    if wins.is_empty() {
        return Err(Error::Data(format!(
            "validation split has {} tokens, need at least {}",
            corpus.val().len(),
            seq + 1
        ))
        .into());
    }
    Ok(wins)
}

fn captures(model: &GptModel, windows: &[Vec<u32>]) -> Result<std::collections::BTreeMap<String, Tensor>> {
    let cols = model.config().context_length + 1;
    let block = TokenBlock::new(windows.len(), cols, windows.concat())?;
    let (inputs, _) = block.split_targets()?;
    let opts = ForwardOptions {
        capture: true,
        ..Default::default()
    };
    Ok(model.forward_graph(&inputs, &opts)?.captures)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct ZeroBinEntry {
    name: String,
    elements: usize,
    zero_bin_fraction: f64,
}

#[derive(Serialize)]
struct ZeroBinReport {
    moment: MomentKind,
    /// Whether the checkpoint stored this moment quantized.
    stored_quantized: bool,
    quant: QuantConfig,
    overall: f64,
    tensors: Vec<ZeroBinEntry>,
}

pub fn run(what: Analysis) -> Result<()> {
    match what {
        Analysis::Outliers {
            ckpt,
            windows,
            k,
            layer,
            common,
        } => {
            let corpus = load_corpus(&windows.corpus)?;
            let mut per_layer: std::collections::BTreeMap<String, Vec<(u64, Tensor)>> = Default::default();
            for (i, path) in ckpt.iter().enumerate() {
                let c = load_ckpt(path)?;
                let step = step_of(&c, i as u64);
                let wins = val_windows(&corpus, &c.model, windows.windows.unwrap_or(4))?;
                for (name, acts) in captures(&c.model, &wins)? {
                    if layer.is_empty() || layer.contains(&name) {
                        per_layer.entry(name).or_default().push((step, acts));
                    }
                }
            }
            if per_layer.is_empty() {
                return Err(Error::InvalidConfig(format!("no layer matches {layer:?}")).into());
            }
            let mut reports = Vec::new();
            for (name, caps) in &per_layer {
                let r = outlier_report(name, caps, k)?;
                let ch: Vec<String> = r.persistence.iter().map(|(c, s)| format!("{c}x{}", s.len())).collect();
                println!("{name}: outlier channels [{}]", ch.join(", "));
                reports.push(r);
            }
            write_json(&common.out.join("outliers.json"), &reports)
        }
        Analysis::Sharpness {
            ckpt,
            windows,
            rho,
            m,
            common,
        } => {
            let corpus = load_corpus(&windows.corpus)?;
            let c = load_ckpt(&ckpt)?;
            let wins = val_windows(&corpus, &c.model, windows.windows.unwrap_or(4 * m))?;
            let obj = ModelObjective::new(c.model, wins, windows.chunk)?;
            let rhos = if rho.is_empty() { DEFAULT_RHOS.to_vec() } else { rho };
            let report = sharpness_report(&obj, &rhos, m)?;
            for e in &report.entries {
                println!("rho {:<8} sharpness {:.6e}", e.rho, e.sharpness);
            }
            write_json(&common.out.join("sharpness.json"), &report)
        }
        Analysis::Surface {
            ckpt,
            windows,
            res,
            extent,
            seed,
            common,
        } => {
            let corpus = load_corpus(&windows.corpus)?;
            let c = load_ckpt(&ckpt)?;
            let wins = val_windows(&corpus, &c.model, windows.windows.unwrap_or(16))?;
            let obj = ModelObjective::new(c.model, wins, windows.chunk)?;
            let s = loss_surface_2d(&obj, extent, res, seed)?;
            println!("center loss {:.6}", s.center());
            write_file(&common.out.join("surface.csv"), s.to_csv().as_bytes())?;
            write_json(&common.out.join("surface.json"), &s)
        }
        Analysis::Histogram {
            ckpt,
            param,
            activation,
            corpus,
            windows,
            bins,
            common,
        } => {
            let c = load_ckpt(&ckpt)?;
            let tensor = match (param, activation) {
                (Some(name), _) => c
                    .model
                    .params()
                    .iter()
                    .find(|p| p.name == name)
                    .map(|p| p.value.clone())
                    .ok_or_else(|| Error::InvalidConfig(format!("no parameter named {name}")))?,
                (None, Some(layer)) => {
                    let path = corpus.ok_or_else(|| Error::InvalidConfig("--activation needs --corpus".into()))?;
                    let corpus = load_corpus(&path)?;
                    let wins = val_windows(&corpus, &c.model, windows)?;
                    captures(&c.model, &wins)?
                        .remove(&layer)
                        .ok_or_else(|| Error::InvalidConfig(format!("no captured layer named {layer}")))?
                }
                (None, None) => {
                    return Err(Error::InvalidConfig("pass --param or --activation".into()).into());
                }
            };
            let h = histogram(&tensor, bins)?;
            let path = common.out.join("histogram.csv");
            write_file(&path, h.to_csv().as_bytes())?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Analysis::Zerobin {
            ckpt,
            moment,
            bits,
            granularity,
            common,
        } => {
            let which = match moment.as_str() {
                "m" => MomentKind::M,
                "v" => MomentKind::V,
                other => return Err(Error::InvalidConfig(format!("moment must be m or v, got {other}")).into()),
            };
            let c = load_ckpt(&ckpt)?;
            let (_, store) = c
                .optimizer
                .as_ref()
                .ok_or_else(|| Error::Data(format!("{} has no optimizer state", ckpt.display())))?;
            let stored = store.quant_config(which);
            let quant = match stored {
                Some(q) => q,
                None => QuantConfig::symmetric(bits, granularity.parse::<Granularity>()?)?,
            };
            let mut tensors = Vec::new();
            let (mut zeros, mut total) = (0.0, 0usize);
            for (p, mo) in c.model.params().iter().zip(store.moments(which)) {
                let frac = match mo {
                    Moment::Quantized(q) => zero_bin_fraction(q),
                    Moment::Real(t) => zero_bin_fraction(&quantize(t, &moment_config(&quant, t.shape()))?),
                };
                let n = p.value.len();
                zeros += frac * n as f64;
                total += n;
                tensors.push(ZeroBinEntry {
                    name: p.name.clone(),
                    elements: n,
                    zero_bin_fraction: frac,
                });
            }
            let report = ZeroBinReport {
                moment: which,
                stored_quantized: stored.is_some(),
                quant,
                overall: if total == 0 { 0.0 } else { zeros / total as f64 },
                tensors,
            };
            println!("overall zero-bin fraction {:.4}", report.overall);
            write_json(&common.out.join("zerobin.json"), &report)
        }
    }
}
