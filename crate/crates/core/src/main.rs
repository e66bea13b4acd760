use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use regime_fbsde::cli::{load_config, run_task, Overrides, Task};

#[derive(Parser)]
#[command(name = "regime-fbsde", version, about = "Regime-switching FBSDE games: simulate, solve, verify")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the chain: occupation fractions and regime probabilities.
    ChainSim(Common),
    /// Entropy-penalized robust value and optimal scenario.
    EntropySolve(Common),
    /// Closed-form insurer/market equilibrium and f-curves.
    InsuranceSolve(Common),
    /// Unilateral-deviation check of an equilibrium.
    VerifyNash(Common),
    /// Regression error against the closed form on refined grids.
    BsdeConvergence(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (task, args) = match cli.command {
        Command::ChainSim(a) => (Task::ChainSim, a),
        Command::EntropySolve(a) => (Task::EntropySolve, a),
        Command::InsuranceSolve(a) => (Task::InsuranceSolve, a),
        Command::VerifyNash(a) => (Task::VerifyNash, a),
        Command::BsdeConvergence(a) => (Task::BsdeConvergence, a),
    };
    let run = || -> regime_fbsde::Result<bool> {
        let mut cfg = load_config(&args.config)?;
        cfg.apply(&Overrides { seed: args.seed, paths: args.paths, steps: args.steps, workers: args.workers });
        let outcome = run_task(&cfg, task, &args.out)?;
        println!("{}", outcome.bundle.results.display());
        println!("{}", outcome.bundle.summary.display());
        println!("{task}: {}", if outcome.passed { "PASS" } else { "FAIL" });
        Ok(outcome.passed)
    };
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
