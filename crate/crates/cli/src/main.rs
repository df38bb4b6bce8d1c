//! `qptrain`: prepare corpora, train quantized toy GPTs, analyze checkpoints
//! and estimate training cost.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data or I/O error,
//! 3 training divergence.

mod analyze;
mod profile;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use qptrain::data::{self, synthetic, TokenizedCorpus};
use qptrain::train::{self, TrainRunConfig};
use qptrain::Error;

pub const OUT_DIR_ENV: &str = "QPTRAIN_OUT_DIR";

#[derive(Parser)]
#[command(name = "qptrain", version, about = "Quantized pre-training laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize text files into a corpus cache (`<out>/corpus.bin`).
    Prepare {
        #[arg(long, num_args = 1.., required = true)]
        corpus: Vec<PathBuf>,
        #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 0.005)]
        val_frac: f64,
    },
    /// Run training from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run directory; defaults to `$QPTRAIN_OUT_DIR/<config stem>` or `out/<config stem>`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Analyze a checkpoint.
    Analyze {
        #[command(subcommand)]
        what: analyze::Analysis,
    },
    /// Analytic memory and FLOP estimates.
    Profile(profile::ProfileArgs),
    /// Write a synthetic English-like text corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1_000_000)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidConfig(_)) => 1,
        Some(Error::Divergence(_)) | Some(Error::NonFinite(_)) => 3,
        _ => 2,
    }
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| io_error(path, e))?;
    Ok(())
}

pub fn io_error(path: &Path, source: std::io::Error) -> anyhow::Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
    .into()
}

pub fn load_corpus(path: &Path) -> Result<TokenizedCorpus> {
    Ok(TokenizedCorpus::load(path)?)
}

fn prepare(corpus: &[PathBuf], out: &Path, val_frac: f64) -> Result<()> {
    let c = data::prepare(corpus, val_frac)?;
    let path = out.join("corpus.bin");
    std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    c.save(&path)?;
    println!("wrote {}", path.display());
    println!("tokens {} (train {}, val {})", c.len(), c.train_len(), c.val().len());
    println!("digest {}", c.digest_hex());
    Ok(())
}

fn train_cmd(config: &Path, resume: Option<&Path>, out: Option<PathBuf>, quiet: bool) -> Result<()> {
    let mut cfg = TrainRunConfig::from_file(config)?;
    if cfg.data.corpus.as_os_str().is_empty() {
        return Err(Error::InvalidConfig("data.corpus is required".into()).into());
    }
    if cfg.data.corpus.is_relative() {
        let base = config.parent().unwrap_or(Path::new(""));
        cfg.data.corpus = base.join(&cfg.data.corpus);
    }
    let corpus = load_corpus(&cfg.data.corpus)?;
    let out = out.unwrap_or_else(|| {
        let root = std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("out"), PathBuf::from);
        root.join(config.file_stem().unwrap_or_default())
    });
    let summary = train::run(&cfg, &corpus, &out, resume, &mut |r| {
        if quiet {
            return;
        }
        if let Some(val) = r.val_loss {
            eprintln!(
                "step {:>6}  lr {:.3e}  train {:.4}  val {:.4}  grad {:.3}",
                r.step, r.lr, r.train_loss, val, r.grad_norm
            );
        }
    })?;
    println!("run directory {}", out.display());
    println!("steps {}", summary.steps_completed);
    println!("initial val loss {:.6}", summary.initial_val_loss);
    if let Some(l) = summary.final_val_loss {
        println!("final val loss {l:.6}");
    }
    if summary.divergence.is_some() {
        eprintln!("divergence report: {}", out.join("divergence.json").display());
    }
    summary.into_result()?;
    Ok(())
}

fn synth(out: &Path, bytes: usize, seed: u64) -> Result<()> {
    write_file(out, synthetic::generate(seed, bytes).as_bytes()).with_context(|| "writing synthetic corpus")?;
    println!("wrote {} bytes to {}", bytes, out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Prepare { corpus, out, val_frac } => prepare(&corpus, &out, val_frac),
        Command::Train {
            config,
            resume,
            out,
            quiet,
        } => train_cmd(&config, resume.as_deref(), out, quiet),
        Command::Analyze { what } => analyze::run(what),
        Command::Profile(args) => profile::run(&args),
        Command::Synth { out, bytes, seed } => synth(&out, bytes, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
