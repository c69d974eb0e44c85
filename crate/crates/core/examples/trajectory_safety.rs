//! Drives the controller to every vertex of the region, classifies the
//! resulting trajectory set and prints how much of the region is covered.
//!
//! ```not_rust
//! cargo run --release --example trajectory_safety
//! ```

use ofo_safety::analysis::{classify, coverage_table, TrajectorySet, COVERAGE_GRID};
use ofo_safety::controller::{run_schedule, ControllerConfig, NoDisturbance, SetPoint};
use ofo_safety::grid::load_grid;
use ofo_safety::region::{initial_state, sweep_for, SweepOptions};
use ofo_safety::sensitivity::compute_sensitivity;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let grid = load_grid(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/four_bus_ring.json"))?;
    let f = sweep_for(&grid, &SweepOptions::default())?;
    let (u0, _) = initial_state(&grid)?;
    let map = compute_sensitivity(&grid, &u0)?;
    let cfg = ControllerConfig::new(0.11294);

    let mut runs = Vec::new();
    for &(p, q) in &f.vertices {
        runs.push(run_schedule(&grid, &u0, &map, &[SetPoint::new(p, q)], &cfg, &NoDisturbance)?);
    }
    let set = TrajectorySet::new(runs);
    let reached = set.trajectories.iter().filter(|t| t.converged()).count();
    println!("{reached} of {} vertices reached", set.len());

    let verdict = classify(&set, &f, cfg.convergence_tol);
    println!("verdict {:?}, {} states outside the region", verdict.class, verdict.witnesses.len());
    for c in coverage_table(&set, &f, &COVERAGE_GRID) {
        println!("k={:<4} coverage {:.3}{}", c.k, c.fraction, if c.degenerate { " (degenerate)" } else { "" });
    }
    Ok(())
}
