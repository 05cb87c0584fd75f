use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use plastokh::cli::{run_command, Command};
use plastokh::config::parse_config;

/// Elasto-plastic oscillator under filtered noise: simulation, Dirichlet
/// solves, cycle operators and invariant measures.
#[derive(Debug, Parser)]
#[command(name = "plastokh", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// Configuration file (TOML sections).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `[output] dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Random seed; overrides `[mc] seed`.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(n) = std::env::var("PLASTOKH_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", args.config.display());
            return ExitCode::from(1);
        }
    };
    let mut cfg = match parse_config(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}", args.config.display());
            return ExitCode::from(1);
        }
    };
    if let Some(out) = args.out {
        cfg.output.dir = out;
    }
    if let Some(seed) = args.seed {
        cfg.mc.seed = seed;
    }
    let report = run_command(args.command, &cfg);
    print!("{}", report.to_log());
    ExitCode::from(report.exit_code() as u8)
}
