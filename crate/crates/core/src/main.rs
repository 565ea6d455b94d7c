//! `cnfield` command-line interface: run a demo against a config file (or
//! its built-in default), or run the self-verification suite.
//!
//! Exit codes: 0 success, 1 internal error, 2 constraint-residual violation,
//! 3 singular system, 4 configuration/input error.

use clap::{Args, Parser, Subcommand};
use cnfield::apps::{self, config::Config};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cnfield", version, about = "Constrained-field solver toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file; the demo's built-in default when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Least-time ray path with hard endpoint constraints.
    Fermat(RunArgs),
    /// Self-tuning transport solve on an irregular space-time grid.
    Advection(RunArgs),
    /// Inference-only re-solve of a trained advection kernel.
    Transfer(RunArgs),
    /// Implicit 2D shape with exact point + normal interpolation.
    Shape2d(RunArgs),
    /// Patch-based sparse reconstruction from pseudo-normal constraints.
    ReconSparse(RunArgs),
    /// Condition-surrogate training across basis families.
    CondAblation(RunArgs),
    /// Run the finite-difference / oracle verification suite.
    Check,
}

fn run(demo: &str, args: &RunArgs) -> cnfield::Result<()> {
    let text = match &args.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| cnfield::Error::Io(format!("{}: {e}", path.display())))?,
        None => apps::default_config(demo)
            .expect("every demo ships a default config")
            .to_string(),
    };
    let mut cfg = Config::parse(&text)?;
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string());
    }
    if let Some(out) = &args.out {
        cfg.set("out", &out.display().to_string());
    }
    let out = PathBuf::from(cfg.str_or("out", &format!("out/{demo}")));
    eprintln!("running {demo} -> {}", out.display());
    apps::run_demo(demo, &cfg, &out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (demo, args) = match &cli.command {
        Command::Check => {
            return if apps::check::run_checks() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            };
        }
        Command::Fermat(a) => ("fermat", a),
        Command::Advection(a) => ("advection", a),
        Command::Transfer(a) => ("transfer", a),
        Command::Shape2d(a) => ("shape2d", a),
        Command::ReconSparse(a) => ("recon_sparse", a),
        Command::CondAblation(a) => ("cond_ablation", a),
    };
    match run(demo, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(apps::exit_code(&e) as u8)
        }
    }
}
