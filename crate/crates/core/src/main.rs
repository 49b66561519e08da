use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use heishom::cli::{load_config, resolve, run, CliError};

/// Runs the experiments selected by a JSON config and writes CSV reports
/// plus `metadata.json` to the output directory.
#[derive(Debug, Parser)]
#[command(name = "heishom", version)]
struct Args {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces both `params.master_seed` and `trajectory.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

fn execute(args: &Args) -> Result<bool, CliError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.params.master_seed = seed;
        cfg.trajectory.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = Some(out.clone());
    }
    let cfg = resolve(cfg)?;
    let out = cfg.output_dir.clone().expect("resolved");
    let outcome = run(&cfg, &out)?;
    for c in &outcome.checks {
        println!(
            "{} {} measured={} bound={}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.measured,
            c.bound
        );
    }
    Ok(outcome.all_pass())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
    }
}
