mod commands;
mod config;
mod error;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Ctx;
use crate::config::RunConfig;
use crate::error::CliError;

/// Quantized cooperative perception pipeline: generate scenes, pretrain,
/// learn the message codebook, calibrate, and evaluate.
#[derive(Parser)]
#[command(name = "qv2x", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Dotted-path override, e.g. `--set calibration.w_bits=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/eval scenarios and grid fixtures.
    Gen(Common),
    /// Train the full-precision model.
    Train(Common),
    /// Learn the message codebook and fine-tune the model jointly.
    Codebook(Common),
    /// Post-training quantization of the model.
    Calibrate(Common),
    /// Cell-AP without latency across the pose-noise sweep.
    EvalIdeal(Common),
    /// Cell-AP and latency with simulated transmission.
    EvalSystem(Common),
    /// Summary table and SVG charts from the metric files.
    Report(Common),
    /// Print the resolved configuration as JSON.
    Config(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (Command::Gen(c)
    | Command::Train(c)
    | Command::Codebook(c)
    | Command::Calibrate(c)
    | Command::EvalIdeal(c)
    | Command::EvalSystem(c)
    | Command::Report(c)
    | Command::Config(c)) = &cli.command;
    let cfg = RunConfig::resolve(c.config.as_deref(), &c.overrides, c.seed)?;
    if let Command::Config(_) = cli.command {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        return Ok(());
    }
    let ctx = Ctx::new(cfg, c.out.clone())?;
    match cli.command {
        Command::Gen(_) => commands::gen(&ctx),
        Command::Train(_) => commands::train(&ctx),
        Command::Codebook(_) => commands::codebook(&ctx),
        Command::Calibrate(_) => commands::calibrate(&ctx),
        Command::EvalIdeal(_) => commands::eval_ideal(&ctx),
        Command::EvalSystem(_) => commands::eval_system(&ctx),
        Command::Report(_) => commands::report(&ctx),
        Command::Config(_) => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
