//! `stflow` command-line interface.

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Conditional spatio-temporal normalizing flows for grid-sequence
/// forecasting.
///
/// Configuration keys can be overridden with `--section.key=value`, e.g.
/// `--model.L=3 --train.steps=500`. `STFLOW_SEED` overrides the configured
/// seed; an explicit `--run.seed=` flag wins over it.
#[derive(Debug, Parser)]
#[command(name = "stflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic STGRID dataset.
    MakeData(MakeDataArgs),
    /// Train a model, or resume from a checkpoint.
    Train(TrainArgs),
    /// Per-lead metrics of the flow and the persistence baseline.
    Evaluate(EvaluateArgs),
    /// Autoregressive ensemble rollout written as PGM frames.
    Rollout(RolloutArgs),
    /// Draw next-frame samples from one context.
    Sample(SampleArgs),
    /// Run the built-in invariant checks.
    Verify(VerifyArgs),
    /// Print the resolved configuration.
    Config(ConfigArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DataKind {
    Advection,
    Stochastic,
}

#[derive(Debug, Args)]
struct MakeDataArgs {
    #[arg(long, value_enum)]
    kind: DataKind,
    /// Output file, or directory when `--sequences` exceeds 1.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    /// Frames per sequence.
    #[arg(long, default_value_t = 64)]
    frames: usize,
    #[arg(long, default_value_t = 1)]
    sequences: usize,
    /// Advection velocity along the width, pixels per step.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    vx: f64,
    /// Advection velocity along the height, pixels per step.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    vy: f64,
    /// Forcing amplitude of the stochastic dataset.
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, env = "STFLOW_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ConfigSource {
    /// Named preset the configuration starts from.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// `key=value` file applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Checkpoint to continue from; its configuration replaces the preset.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Directory for `flow.csv` and `persistence.csv`; defaults to
    /// `<run.out_dir>/eval`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the flow forecast by the ground truth.
    #[arg(long, hide = true)]
    oracle: bool,
}

#[derive(Debug, Args)]
struct RolloutArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    /// Index of the starting window within the split.
    #[arg(long, default_value_t = 0)]
    window: usize,
    /// Rollout length; defaults to `eval.steps`.
    #[arg(long)]
    steps: Option<usize>,
    /// Ensemble size; defaults to `eval.trajectories`.
    #[arg(long)]
    trajectories: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Output directory; defaults to `<run.out_dir>/rollout`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    #[arg(long, default_value_t = 0)]
    window: usize,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Output directory; defaults to `<run.out_dir>/samples`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Perturb the parameters used by the inverse pass.
    #[arg(long, hide = true)]
    corrupt_inverse: bool,
    #[arg(long, env = "STFLOW_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    #[command(flatten)]
    source: ConfigSource,
}

const SECTIONS: [&str; 6] = ["model", "optim", "train", "data", "eval", "run"];

/// Pulls `--section.key=value` arguments out of `args`.
fn split_overrides(args: Vec<OsString>) -> (Vec<OsString>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        let parsed = arg.to_str().and_then(|s| {
            let body = s.strip_prefix("--")?;
            let (key, value) = body.split_once('=')?;
            let (section, _) = key.split_once('.')?;
            SECTIONS
                .contains(&section)
                .then(|| (key.to_string(), value.to_string()))
        });
        match parsed {
            Some(kv) => overrides.push(kv),
            None => rest.push(arg),
        }
    }
    (rest, overrides)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let (args, overrides) = split_overrides(std::env::args_os().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command, &overrides) {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
