//! Run a task from an in-memory scenario file, as the command-line tool does.

use regime_fbsde::cli::{parse_config, run_task, Task};

const SCENARIO: &str = r#"
schema_version = 1

[chain]
rates = [[-1.0, 1.0], [2.0, -2.0]]

[run]
horizon = 20.0
steps = 20
paths = 2000
seed = 4
"#;

fn main() -> regime_fbsde::Result<()> {
    let cfg = parse_config(SCENARIO)?;
    let out = std::env::temp_dir().join("regime-fbsde-scenario");
    let outcome = run_task(&cfg, Task::ChainSim, &out)?;
    println!("wrote {} and {}", outcome.bundle.results.display(), outcome.bundle.summary.display());
    println!("{}", serde_json::to_string_pretty(&outcome.summary["results"]).unwrap_or_default());
    Ok(())
}
