//! Runs the `for`, `run` and `mc` commands in-process on the bundled
//! scenarios and writes their outputs under `target/scenario-demo`.
//!
//! ```not_rust
//! cargo run --release --example scenario_pipeline
//! ```

use std::path::Path;

use ofo_safety::scenario::{cmd_for, cmd_mc, cmd_run, Overrides, Scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let scenarios = root.join("fixtures/scenarios");
    let out = root.join("../../target/scenario-demo");

    let jobs = [("two_bus_for.json", "for"), ("four_bus_hull.json", "run"), ("near_voltage_limit_noisy.json", "mc")];
    for (file, command) in jobs {
        let overrides = Overrides { out: Some(out.join(file.trim_end_matches(".json"))), ..Default::default() };
        let s = Scenario::load(scenarios.join(file), &overrides)?;
        let artifacts = match command {
            "for" => cmd_for(&s)?,
            "run" => cmd_run(&s)?,
            _ => cmd_mc(&s)?,
        };
        artifacts.write(&s.output)?;
        println!("{command} {file}: {}", artifacts.summary);
        for (name, body) in &artifacts.files {
            println!("  {} ({} bytes)", name, body.len());
        }
    }
    Ok(())
}
