//! Run a built-in simulation scenario and print its summary.
//!
//! Usage: `cargo run --release --example run_scenario -- I 20`

use std::time::Instant;

use msgam::experiments::{run_scenario, ScenarioConfig, ScenarioId};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let id: ScenarioId = args.next().unwrap_or_else(|| "I".into()).parse()?;
    let runs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20);
    let config = ScenarioConfig {
        runs,
        ..ScenarioConfig::builtin(id)?
    };
    let start = Instant::now();
    let report = run_scenario(&config)?;
    println!("scenario {id:?}: {runs} runs, {} failures, {:.1?}", report.failures, start.elapsed());
    for (i, row) in report.mise.iter().enumerate() {
        for (p, m) in row.iter().enumerate() {
            println!("MISE state {} covariate {}: {m:.4}", i + 1, p + 1);
        }
    }
    for s in &report.summaries {
        println!("{:<16} mean {:>9.4}  sd {:>8.4}  (n = {})", s.name, s.mean, s.sd, s.n);
    }
    for r in report.converged() {
        println!("run {:>3}: lambda {:?}", r.run + 1, r.lambda.values);
    }
    Ok(())
}
