use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use covap::harness::{self, CommandOutput, ExperimentConfig, OutputFormat};
use covap::par::Parallelism;
use covap::CovapError;

/// Simulate and train with the COVAP gradient filter.
#[derive(Parser)]
#[command(name = "covap-sim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Profile one skewed iteration and recommend an interval.
    Profile(Common),
    /// Show buckets, shards and effective tensors.
    Plan(Common),
    /// Run the configured scheme or sweep through the event simulator.
    Simulate(Common),
    /// Train a toy model with in-process workers.
    Train(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
    Table,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Artifact directory; defaults to the config's output_dir, if any.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Threads for sweep points (0 = all cores, 1 = sequential).
    #[arg(long, default_value_t = 1)]
    sweep_parallel: usize,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

fn run(cli: Cli) -> Result<i32, CovapError> {
    let (name, common) = match &cli.command {
        Command::Profile(c) => ("profile", c),
        Command::Plan(c) => ("plan", c),
        Command::Simulate(c) => ("simulate", c),
        Command::Train(c) => ("train", c),
    };
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let mode = match common.sweep_parallel {
        0 => Parallelism::Threads(0),
        n => Parallelism::from_threads(n),
    };
    log::info!("{name}: config `{}`", cfg.name);
    let out: CommandOutput = match cli.command {
        Command::Profile(_) => harness::cmd_profile(&cfg)?,
        Command::Plan(_) => harness::cmd_plan(&cfg)?,
        Command::Simulate(_) => harness::cmd_simulate(&cfg, mode)?,
        Command::Train(_) => harness::cmd_train(&cfg)?,
    };
    let dir = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from));
    if let Some(dir) = dir {
        harness::write_artifacts(&dir, &out)?;
        log::info!(
            "wrote {} artifacts to {}",
            out.artifacts.len(),
            dir.display()
        );
    }
    let format = match common.format {
        Format::Json => OutputFormat::Json,
        Format::Csv => OutputFormat::Csv,
        Format::Table => OutputFormat::Table,
    };
    print!("{}", out.render(format)?);
    Ok(out.status)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COVAP_SIM_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
