//! Argument parsing and subcommand bodies for the `htr` binary.
//!
//! Every subcommand returns the text destined for standard output; nothing is
//! printed until the command has succeeded. Training progress goes to
//! standard error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use htr_core::decoding::{recognize, DecodeMode};
use htr_core::eval::{evaluate, synth_generate, Dataset, SynthConfig};
use htr_core::gradcheck::{run_suite, GradCheckOptions};
use htr_core::training::{fit_with, load_checkpoint, save_checkpoint, TrainConfig};
use htr_core::transducer::{CharVocab, Model, ModelConfig};
use htr_core::vision::{estimate_flops, prepare_line_image, CnnConfig, LineImage, RnnDims};

/// Environment variable that replaces the built-in default seeds.
pub const SEED_ENV: &str = "HTR_SEED";

#[derive(Debug, Parser)]
#[command(name = "htr", version, about = "Offline handwritten text-line recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic line dataset
    Synth(SynthArgs),
    /// Train a model and write its best checkpoint
    Train(TrainArgs),
    /// Score a checkpoint on a dataset (mean CER/WER)
    Eval(EvalArgs),
    /// Transcribe one line image
    Decode(DecodeArgs),
    /// Compare analytic and finite-difference gradients
    Gradcheck(GradcheckArgs),
    /// Estimate forward-pass FLOPs for an input size
    Flops(FlopsArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub lines: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Characters to draw from (default: a-z, space, 0-9)
    #[arg(long)]
    pub alphabet: Option<String>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// LSTM hidden size
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
    /// Halve every convolutional filter count
    #[arg(long)]
    pub reduced: bool,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Stop once validation CER reaches this value
    #[arg(long)]
    pub target_cer: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Beam width (default: the number of output classes)
    #[arg(long, conflicts_with = "greedy")]
    pub beam: Option<usize>,
    #[arg(long)]
    pub greedy: bool,
    /// Also write the per-line TSV report here
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, conflicts_with = "greedy")]
    pub beam: Option<usize>,
    #[arg(long)]
    pub greedy: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long)]
    pub height: usize,
    #[arg(long)]
    pub width: usize,
}

/// `--seed` if given, else `HTR_SEED`, else `fallback`.
pub fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        Err(std::env::VarError::NotPresent) => Ok(fallback),
        Err(e) => bail!("{SEED_ENV}: {e}"),
    }
}

fn decode_mode(beam: Option<usize>, greedy: bool) -> DecodeMode {
    if greedy {
        DecodeMode::Greedy
    } else {
        DecodeMode::Beam(beam)
    }
}

fn load_lines(dir: &Path) -> Result<Vec<LineImage>> {
    let ds = Dataset::open(dir)?;
    let (lines, bad) = ds.load_all();
    for (path, why) in &bad {
        eprintln!("warning: skipping {path}: {why}");
    }
    if lines.is_empty() {
        bail!("no readable lines in {}", dir.display());
    }
    Ok(lines)
}

pub fn synth(a: &SynthArgs) -> Result<String> {
    let mut cfg = SynthConfig { lines: a.lines, seed: resolve_seed(a.seed, 0)?, ..SynthConfig::default() };
    if let Some(alpha) = &a.alphabet {
        let mut chars: Vec<char> = alpha.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        cfg.alphabet = chars;
    }
    if let Some(n) = a.noise {
        cfg.noise_sigma = n;
    }
    synth_generate(&cfg, &a.out)?;
    Ok(format!("wrote {} lines to {}\n", cfg.lines, a.out.display()))
}

pub fn train(a: &TrainArgs) -> Result<String> {
    let defaults = TrainConfig::default();
    let seed = resolve_seed(a.seed, defaults.seed)?;
    let cfg = TrainConfig {
        batch_size: a.batch.unwrap_or(defaults.batch_size),
        lr: a.lr.unwrap_or(defaults.lr),
        max_epochs: a.epochs.unwrap_or(defaults.max_epochs),
        gamma: a.gamma.unwrap_or(defaults.gamma),
        augment: !a.no_augment,
        target_cer: a.target_cer,
        seed,
        ..defaults
    };
    cfg.validate()?;
    let train = load_lines(&a.data)?;
    let val = load_lines(&a.val)?;
    let vocab = CharVocab::from_texts(train.iter().filter_map(|l| l.transcript.as_deref()));
    let mut config = if a.reduced { ModelConfig::with_cnn(CnnConfig::halved(), a.hidden) } else { ModelConfig::with_cnn(CnnConfig::standard(), a.hidden) };
    if let Some(p) = a.dropout {
        config.dropout = p;
    }
    let model = Model::<f32>::new(config, vocab, seed)?;
    let out = fit_with(model, &train, &val, &cfg, |e| {
        eprintln!("epoch {:>4}  loss {:.4}  val_cer {}  {:.1}s", e.epoch, e.mean_loss, e.val_cer.map_or("-".into(), |c| format!("{c:.4}")), e.seconds);
    })?;
    save_checkpoint(&out.best, &a.out)?;
    let cer = out.best.val_cer.map_or("n/a".into(), |c| format!("{c:.4}"));
    Ok(format!("trained {} epochs ({} steps); best validation CER {cer}; wrote {}\n", out.history.len(), out.best.step, a.out.display()))
}

pub fn eval(a: &EvalArgs) -> Result<String> {
    let ckpt = load_checkpoint::<f32>(&a.ckpt)?;
    let ds = Dataset::open(&a.data)?;
    let report = evaluate(&ckpt.model, &ds, decode_mode(a.beam, a.greedy));
    if report.lines.is_empty() {
        bail!("no line of {} could be scored ({} skipped)", a.data.display(), report.skipped.len());
    }
    if let Some(path) = &a.report {
        report.write(path)?;
    }
    let mut out = String::new();
    for (path, why) in &report.skipped {
        eprintln!("warning: skipped {path}: {why}");
    }
    writeln!(out, "mode\t{}", report.mode)?;
    writeln!(out, "lines\t{}", report.lines.len())?;
    writeln!(out, "skipped\t{}", report.skipped.len())?;
    writeln!(out, "mean_cer\t{}", report.mean_cer)?;
    writeln!(out, "mean_wer\t{}", report.mean_wer)?;
    Ok(out)
}

pub fn decode(a: &DecodeArgs) -> Result<String> {
    let ckpt = load_checkpoint::<f32>(&a.ckpt)?;
    let img = prepare_line_image(&a.image)?;
    let r = recognize(&ckpt.model, &img, decode_mode(a.beam, a.greedy))?;
    if r.decoded.truncated() {
        eprintln!("warning: hit the length cap before <eos>");
    }
    Ok(format!("{}\n", r.text))
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<String> {
    let reports = run_suite(0..a.seeds, GradCheckOptions::default())?;
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed).map(|r| r.to_string()).collect();
    if !failed.is_empty() {
        bail!("{} of {} gradient checks failed:\n{}", failed.len(), reports.len(), failed.join("\n"));
    }
    let mut out = String::new();
    for r in &reports {
        writeln!(out, "{r}")?;
    }
    writeln!(out, "{} gradient checks passed", reports.len())?;
    Ok(out)
}

pub fn flops(a: &FlopsArgs) -> Result<String> {
    if a.height == 0 || a.width == 0 {
        bail!("height and width must be positive");
    }
    Ok(format!("{}\n", estimate_flops(&CnnConfig::standard(), &RnnDims::standard(), a.height, a.width)))
}

pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Decode(a) => decode(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Flops(a) => flops(a),
    }
}
