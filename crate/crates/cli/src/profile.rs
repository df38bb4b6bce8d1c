use anyhow::Result;
use clap::{Args, ValueEnum};

use qptrain::diagnostics::{linear_flop_fraction, memory_estimate, OptimizerKind};
use qptrain::model::ModelConfig;
use qptrain::Error;

#[derive(Clone, Copy, ValueEnum)]
pub enum Optimizer {
    Adamw,
    SgdMomentum,
    Sgd,
}

#[derive(Args)]
pub struct ProfileArgs {
    /// `toy`, `gpt2-small`, or `key=value` pairs from
    /// `layers, d_model, heads, ff, vocab, context` (e.g. `layers=12,d_model=768`).
    #[arg(long, default_value = "gpt2-small")]
    model: String,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// One or more sequence lengths.
    #[arg(long, num_args = 1.., default_values_t = [1024])]
    seq: Vec<usize>,
    #[arg(long, default_value_t = 2.0)]
    bytes: f64,
    #[arg(long, value_enum, default_value = "adamw")]
    optimizer: Optimizer,
    #[arg(long)]
    m_bits: Option<u8>,
    #[arg(long)]
    v_bits: Option<u8>,
    /// Print only the linear-layer FLOP fraction table.
    #[arg(long)]
    flops: bool,
}

pub fn parse_model(spec: &str) -> Result<ModelConfig> {
    let mut cfg = match spec {
        "toy" => return Ok(ModelConfig::toy()),
        "gpt2-small" => return Ok(ModelConfig::gpt2_small()),
        _ => ModelConfig::gpt2_small(),
    };
    let mut ff_set = false;
    for pair in spec.split(',').filter(|p| !p.is_empty()) {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("model spec entry {pair:?} is not key=value")))?;
        let v: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("model spec value {v:?} is not an integer")))?;
        match k.trim() {
            "layers" => cfg.n_layers = v,
            "d_model" => cfg.d_model = v,
            "heads" => cfg.n_heads = v,
            "ff" => {
                cfg.d_ff = v;
                ff_set = true;
            }
            "vocab" => cfg.vocab_size = v,
            "context" => cfg.context_length = v,
            other => return Err(Error::InvalidConfig(format!("unknown model spec key {other:?}")).into()),
        }
    }
    if !ff_set {
        cfg.d_ff = 4 * cfg.d_model;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn human(bytes: f64) -> String {
    const UNITS: [&str; 5] = ["B", "KiB", "MiB", "GiB", "TiB"];
    let mut v = bytes;
    let mut u = 0;
    while v >= 1024.0 && u + 1 < UNITS.len() {
        v /= 1024.0;
        u += 1;
    }
    format!("{v:.2} {}", UNITS[u])
}

pub fn run(args: &ProfileArgs) -> Result<()> {
    let cfg = parse_model(&args.model)?;
    println!(
        "model: {} layers, d_model {}, {} heads, ff {}, vocab {}, {} parameters",
        cfg.n_layers,
        cfg.d_model,
        cfg.n_heads,
        cfg.d_ff,
        cfg.vocab_size,
        cfg.param_count()
    );
    if args.flops {
        println!("{:>8}  {:>15}", "seq", "linear_fraction");
        for &t in &args.seq {
            if t == 0 {
                return Err(Error::InvalidConfig("sequence length must be positive".into()).into());
            }
            println!("{t:>8}  {:>15.6}", linear_flop_fraction(&cfg, t));
        }
        return Ok(());
    }
    let kind = match args.optimizer {
        Optimizer::Adamw => OptimizerKind::AdamW,
        Optimizer::SgdMomentum => OptimizerKind::SgdMomentum,
        Optimizer::Sgd => OptimizerKind::Sgd,
    };
    for &t in &args.seq {
        let m = memory_estimate(&cfg, args.batch, t, args.bytes, kind, [args.m_bits, args.v_bits])?;
        println!();
        println!("batch {}, seq {t}, {} bytes/element", args.batch, args.bytes);
        println!("{:<18} {:>18} {:>12}", "component", "bytes", "");
        for (name, b) in m.components() {
            println!("{name:<18} {b:>18.0} {:>12}", human(b));
        }
        println!("{:<18} {:>18.0} {:>12}", "start_of_backward", m.start_of_backward, human(m.start_of_backward));
        println!("{:<18} {:>18.0} {:>12}", "end_of_backward", m.end_of_backward, human(m.end_of_backward));
        let scenario = match m.peak_scenario {
            qptrain::diagnostics::PeakScenario::StartOfBackward => "start_of_backward",
            qptrain::diagnostics::PeakScenario::EndOfBackward => "end_of_backward",
        };
        println!("peak {} at {scenario}; largest component {}", human(m.peak), m.largest_component());
        println!("linear FLOP fraction {:.6}", linear_flop_fraction(&cfg, t));
    }
    Ok(())
}
