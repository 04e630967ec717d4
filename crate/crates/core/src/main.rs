use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use convexctrl::cli::{init_threads, parse_config, run_scenario, Command};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    /// Integrate the initial schedule and export the trajectory.
    Simulate,
    /// Run the forward-backward sweep and export trajectory, costates, schedule and report.
    Optimize,
    /// Run the finite-difference and duality checks.
    Verify,
    /// Run the particle-count refinement study.
    Converge,
}

#[derive(Debug, Parser)]
#[command(
    name = "convexctrl",
    version,
    about = "Optimal control of agent systems on convex state spaces"
)]
struct Args {
    command: Cmd,
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for random placement and the checks (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let run = || -> convexctrl::Result<i32> {
        init_threads()?;
        let mut config = parse_config(&args.config)?;
        if let Some(dir) = &args.out {
            config.output.directory = dir.clone();
        }
        if let Some(seed) = args.seed {
            config.ensemble.seed = seed;
            config.verify.seed = seed;
        }
        let command = match args.command {
            Cmd::Simulate => Command::Simulate,
            Cmd::Optimize => Command::Optimize,
            Cmd::Verify => Command::Verify,
            Cmd::Converge => Command::Converge,
        };
        let outcome = run_scenario(&config, command)?;
        // A closed pipe (e.g. `| head`) is not an error of the run.
        let mut stdout = std::io::stdout().lock();
        let _ = writeln!(stdout, "{}", outcome.summary);
        for p in &outcome.artifacts {
            let _ = writeln!(stdout, "wrote {}", p.display());
        }
        Ok(outcome.status.code())
    };
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
