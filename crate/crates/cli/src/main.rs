use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdiff_core::denoiser::{TrainObserver, TrainState};
use cdiff_core::harness::{self, Stage, StageContext};
use cdiff_core::metrics::Report;
use cdiff_core::{Error, Method, RunConfig, StageError};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cdiff", version, about = "Environment-aware radio map super-resolution with conditional diffusion")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults to the desk-scale smoke settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single-threaded, bitwise reproducible execution.
    #[arg(long, global = true)]
    serial: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of (HR, LR) EnvCF pairs.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Decimate HR EnvCF rasters (a file or a directory of PNGs).
    Degrade {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Reconstruct the validation items with a trained checkpoint.
    Sample {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write intermediate states every k reverse steps.
        #[arg(long)]
        snapshot_every: Option<usize>,
    },
    /// Score method output directories against the dataset references.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// `name=dir`, repeatable.
        #[arg(long = "method", value_parser = parse_method_dir, required = true)]
        methods: Vec<(String, PathBuf)>,
        /// Directory for report.csv and report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one method on the validation split and report its metrics.
    Bench {
        #[arg(long)]
        method: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Full pipeline: data, training, every method, report.
    Smoke {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        pairs: Option<usize>,
    },
}

fn parse_method_dir(s: &str) -> Result<(String, PathBuf), String> {
    let (name, dir) = s.split_once('=').ok_or_else(|| format!("expected name=dir, got `{s}`"))?;
    if name.is_empty() || dir.is_empty() {
        return Err(format!("expected name=dir, got `{s}`"));
    }
    Ok((name.to_string(), PathBuf::from(dir)))
}

/// Prints a progress line every `every` steps.
struct Progress {
    every: u64,
    total: u64,
}

impl TrainObserver for Progress {
    fn on_step(&mut self, step: u64, loss: f64) -> cdiff_core::Result<()> {
        if step.is_multiple_of(self.every) || step == self.total {
            eprintln!("step {step}/{}: loss {loss:.5}", self.total);
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainState) -> cdiff_core::Result<()> {
        eprintln!("checkpoint at step {}", state.step);
        Ok(())
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, StageError> {
    let cfg = match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::smoke()),
    };
    cfg.stage(Stage::GenData)
}

fn checked(cfg: RunConfig, stage: Stage) -> Result<RunConfig, StageError> {
    cfg.validate().stage(stage)?;
    Ok(cfg)
}

fn print_report(report: &Report) {
    print!("{}", report.render_table());
}

fn run(cli: Cli) -> Result<(), StageError> {
    let mut cfg = load_config(cli.common.config.as_deref())?;
    let serial = cli.common.serial;
    match cli.command {
        Command::GenData { out, pairs, seed } => {
            cfg.data.n_pairs = pairs.unwrap_or(cfg.data.n_pairs);
            cfg.data.seed = seed.unwrap_or(cfg.data.seed);
            let cfg = checked(cfg, Stage::GenData)?;
            let ds = harness::with_parallelism(serial, || harness::gen_data(&cfg, &out)).stage(Stage::GenData)?;
            eprintln!("wrote {} pairs to {}", ds.len(), out.display());
        }
        Command::Degrade { input, out } => {
            let cfg = checked(cfg, Stage::Degrade)?;
            let n = harness::degrade(&cfg, &input, &out).stage(Stage::Degrade)?;
            eprintln!("degraded {n} rasters into {}", out.display());
        }
        Command::Train { data, out, steps, seed } => {
            cfg.train.steps = steps.unwrap_or(cfg.train.steps);
            cfg.train.seed = seed.unwrap_or(cfg.train.seed);
            let cfg = checked(cfg, Stage::Train)?;
            let mut progress = Progress { every: 100, total: cfg.train.steps };
            let (_, outcome) = harness::with_parallelism(serial, || harness::train_stage(&cfg, &data, &out, &mut progress))
                .stage(Stage::Train)?;
            eprintln!("trained {} steps; checkpoint in {}", outcome.losses.len(), out.display());
        }
        Command::Sample { data, checkpoint, out, seed, snapshot_every } => {
            cfg.sample.seed = seed.unwrap_or(cfg.sample.seed);
            let cfg = checked(cfg, Stage::Sample)?;
            let outs = harness::with_parallelism(serial, || harness::sample_stage(&cfg, &data, &checkpoint, &out, snapshot_every))
                .stage(Stage::Sample)?;
            eprintln!("wrote {} reconstructions to {}", outs.len(), out.display());
        }
        Command::Eval { data, methods, out } => {
            let cfg = checked(cfg, Stage::Eval)?;
            let report = harness::with_parallelism(serial, || harness::eval_stage(&cfg, &data, &methods)).stage(Stage::Eval)?;
            if let Some(dir) = out {
                harness::write_report(&dir, &report).stage(Stage::Eval)?;
            }
            print_report(&report);
        }
        Command::Bench { method, data, out, checkpoint } => {
            let method: Method = method.parse().stage(Stage::Bench)?;
            let cfg = checked(cfg, Stage::Bench)?;
            let report = harness::with_parallelism(serial, || harness::bench(&cfg, method, &data, &out, checkpoint.as_deref()))
                .map_err(|source| StageError { stage: bench_stage(method, &source), source })?;
            print_report(&report);
        }
        Command::Smoke { out, steps, pairs } => {
            cfg.train.steps = steps.unwrap_or(cfg.train.steps);
            cfg.data.n_pairs = pairs.unwrap_or(cfg.data.n_pairs);
            let cfg = checked(cfg, Stage::GenData)?;
            let mut progress = Progress { every: 100, total: cfg.train.steps };
            let report = harness::pipeline_smoke(&cfg, &out, serial, &mut progress)?;
            print_report(&report);
        }
    }
    Ok(())
}

/// Sampling failures of the diffusion bench exit as sampling faults.
fn bench_stage(method: Method, err: &Error) -> Stage {
    match (method, err) {
        (Method::Cdiff, Error::CheckpointMismatch(_)) => Stage::Sample,
        _ => Stage::Bench,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
