use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hmcert::pipeline::{self, Command, RunConfig};

/// Stability certificates, Poisson solutions and parameter-Lipschitz bounds
/// for finite Markov chain families.
#[derive(Parser, Debug)]
#[command(name = "hmcert", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Load the model and check every kernel, measure and grid invariant.
    Validate(Args),
    /// Fit drift, minorization and contraction constants, plus Lipschitz hypotheses.
    Certify(Args),
    /// Solve the Poisson equation at every grid point (series and direct).
    Solve(Args),
    /// Certify parameter-Lipschitz bounds on h and u over all grid pairs.
    Sweep(Args),
}

#[derive(clap::Args, Debug)]
struct Args {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 1 runs sequentially.
    #[arg(long)]
    workers: Option<usize>,
    /// Seed for every randomized check; overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Poisson series accuracy; overrides `solve.series_tol`.
    #[arg(long)]
    tol: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Validate(a) => (Command::Validate, a),
        Cmd::Certify(a) => (Command::Certify, a),
        Cmd::Solve(a) => (Command::Solve, a),
        Cmd::Sweep(a) => (Command::Sweep, a),
    };
    let outcome = RunConfig::load(&args.config).and_then(|mut cfg| {
        if let Some(out) = args.out {
            cfg.output.dir = out;
        }
        if let Some(w) = args.workers {
            cfg.workers = Some(w);
        }
        if let Some(s) = args.seed {
            cfg.seed = s;
        }
        if let Some(t) = args.tol {
            cfg.solve.series_tol = t;
        }
        pipeline::run(command, cfg)
    });
    match outcome {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("hmcert {}: {e}", command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
