//! `prunekv` command-line entry point.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{CliError, CliResult, ConfigFile};

#[derive(Parser, Debug)]
#[command(name = "prunekv", version, about = "Adaptively sparse attention with learnable context pruning")]
struct Cli {
    /// TOML file with one table per subcommand; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a character-level model with learned context pruning.
    Train(commands::TrainFlags),
    /// Generate from a checkpoint with a pruned KV cache.
    Generate(commands::GenerateFlags),
    /// Time decode steps over a grid of context lengths and batch sizes.
    Benchmark(commands::BenchmarkFlags),
    /// Emit per-layer sparsity, drop attribution and mask tables.
    Analyze(commands::AnalyzeFlags),
    /// Run the embedded invariant suites.
    Selftest(commands::SelftestFlags),
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("PRUNEKV_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("PRUNEKV_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    match &cli.command {
        Command::Train(f) => commands::train(f, &file),
        Command::Generate(f) => commands::generate(f, &file),
        Command::Benchmark(f) => commands::benchmark(f, &file),
        Command::Analyze(f) => commands::analyze(f, &file),
        Command::Selftest(f) => commands::selftest(f, &file),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error ({}): {e}", e.kind());
            ExitCode::from(e.exit_code())
        }
    }
}
