//! `mcd` command-line entry point.
//!
//! Every command prints its JSON report to stdout. Logging goes to stderr
//! and is controlled by `RUST_LOG` (default `info`). Evaluation batches run
//! sequentially unless `MCD_BACKEND=parallel`; results are identical either
//! way, and training always runs on the single-threaded reference path.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mcd::feature_store::{generate_synthetic_dataset, read_truth, Dataset, Split, SyntheticSpec};
use mcd::harness::{clue_recovery, emit_curves, full_grid, parse_modes, run_ablation};
use mcd::json::write_json_pretty;
use mcd::trainer::{evaluate, fit, gradcheck, load_checkpoint, GradcheckConfig, RunConfig};

#[derive(Parser)]
#[command(name = "mcd", version, about = "Mutual correlation distillation for audio-visual question answering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted-clue dataset with its truth sidecar.
    GenSynth(GenSynth),
    /// Train one model; writes best/last checkpoints, trace and test report.
    Train(Train),
    /// Evaluate a checkpoint on one split.
    Eval(Eval),
    /// Train and evaluate a list of ablation modes (or the full grid).
    Ablate(Ablate),
    /// Compare tape gradients with central finite differences.
    Gradcheck(Gradcheck),
    /// Score clue selections against the planted event frames.
    ClueRecovery(ClueRecovery),
    /// Plot accuracy curves from loss traces.
    Plot(Plot),
}

#[derive(Args)]
struct GenSynth {
    #[arg(long)]
    out: PathBuf,
    /// TOML file with any `SyntheticSpec` fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    keywords: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Run configuration: a TOML file, then flag overrides on top.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let t = &mut cfg.train;
        t.seed = self.seed.unwrap_or(t.seed);
        t.epochs = self.epochs.unwrap_or(t.epochs);
        t.lr = self.lr.unwrap_or(t.lr);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        let m = &mut cfg.model;
        m.blocks = self.blocks.unwrap_or(m.blocks);
        m.frames = self.frames.unwrap_or(m.frames);
        Ok(cfg)
    }
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Ablation mode label such as `fusion=concat` or `default`.
    #[arg(long)]
    mode: Option<String>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Repeatable; without any, the full grid runs.
    #[arg(long = "mode")]
    modes: Vec<String>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long)]
    seed: Option<u64>,
    /// Tensor whose analytic gradient is deliberately perturbed.
    #[arg(long)]
    corrupt: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ClueRecovery {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Plot {
    #[arg(long)]
    out: PathBuf,
    #[arg(required = true)]
    traces: Vec<PathBuf>,
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    if let Some(p) = out {
        write_json_pretty(p, value)?;
    }
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn gen_synth(a: GenSynth) -> Result<()> {
    let mut spec: SyntheticSpec = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SyntheticSpec::default(),
    };
    spec.n_samples = a.n_samples.unwrap_or(spec.n_samples);
    spec.n_val = a.n_val.unwrap_or(spec.n_val);
    spec.n_test = a.n_test.unwrap_or(spec.n_test);
    spec.frames = a.frames.unwrap_or(spec.frames);
    spec.dim = a.dim.unwrap_or(spec.dim);
    spec.n_answer_classes = a.classes.unwrap_or(spec.n_answer_classes);
    spec.n_keywords = a.keywords.unwrap_or(spec.n_keywords);
    spec.noise_sigma = a.noise.unwrap_or(spec.noise_sigma);
    spec.seed = a.seed.unwrap_or(spec.seed);
    let manifest = generate_synthetic_dataset(&spec, &a.out)?;
    #[derive(Serialize)]
    struct Summary {
        out: PathBuf,
        samples: usize,
        spec: SyntheticSpec,
    }
    emit(
        &Summary {
            out: a.out,
            samples: manifest.samples.len(),
            spec,
        },
        None,
    )
}

fn train(a: Train) -> Result<()> {
    let mut cfg = a.run.resolve()?;
    if let Some(m) = &a.mode {
        cfg.model.ablation = parse_modes(&[m])?.remove(0);
    }
    cfg.validate()?;
    let ds = Dataset::load(&a.data)?;
    let outcome = fit(&ds, &cfg, Some(&a.out))?;
    let report = evaluate(&outcome.last, &ds, Split::Test, &cfg)?;
    emit(&report, Some(&a.out.join("test_report.json")))
}

fn eval(a: Eval) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let (model, index) = load_checkpoint(&a.checkpoint)?;
    emit(&evaluate(&model, &ds, a.split, &index.config)?, a.out.as_deref())
}

fn ablate(a: Ablate) -> Result<()> {
    let modes = if a.modes.is_empty() {
        full_grid()
    } else {
        parse_modes(&a.modes)?
    };
    let cfg = a.run.resolve()?;
    let ds = Dataset::load(&a.data)?;
    let report = run_ablation(&ds, &cfg, &modes, Some(&a.out))?;
    emit(&report, None)?;
    if !report.wiring_passed {
        bail!("wiring checks failed");
    }
    Ok(())
}

fn run_gradcheck(a: Gradcheck) -> Result<bool> {
    let mut cfg = GradcheckConfig::default();
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.corrupt = a.corrupt;
    let report = gradcheck(&cfg)?;
    emit(&report, a.out.as_deref())?;
    Ok(report.passed)
}

fn recover(a: ClueRecovery) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let truth = read_truth(&a.data)?;
    let (model, index) = load_checkpoint(&a.checkpoint)?;
    let report = clue_recovery(&model, &ds, &truth, a.split, index.config.train.batch_size)?;
    emit(&report, a.out.as_deref())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match Cli::parse().command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => run_gradcheck(a).and_then(|ok| if ok { Ok(()) } else { bail!("gradient check failed") }),
        Command::ClueRecovery(a) => recover(a),
        Command::Plot(a) => emit_curves(&a.traces, &a.out).map_err(Into::into).and_then(|s| emit(&s, None)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
