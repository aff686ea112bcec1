use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sparsesplat_cli::commands::{self, BenchArgs, QueryArgs, ServeArgs, SynthArgs, TrainArgs};
use sparsesplat_cli::UsageError;

#[derive(Debug, Parser)]
#[command(name = "sparsesplat", version, about = "Sparse-coefficient feature splatting and open-vocabulary queries")]
struct Cli {
    /// Worker threads for rendering and training (0 = all cores).
    #[arg(long, global = true, env = "SPARSESPLAT_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labelled scene with ground-truth targets.
    Synth(SynthArgs),
    /// Fit coefficients and codebooks to a bundle's feature maps.
    Train(TrainArgs),
    /// Run one text query and report timings, localization and mask.
    Query(QueryArgs),
    /// Sweep codebook sizes and write CSV and SVG timings.
    Bench(BenchArgs),
    /// Serve /meta, /render and /query over HTTP.
    Serve(ServeArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Query(a) => commands::query(a),
        Command::Bench(a) => commands::bench(a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("usage error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
