//! Tracks two PCC set points in a row on the 4-bus ring and prints the
//! tracking cost and active constraints per iteration.
//!
//! ```not_rust
//! cargo run --example ofo_tracking
//! ```

use ofo_safety::controller::{run_schedule, ControllerConfig, NoDisturbance, SetPoint};
use ofo_safety::grid::load_grid;
use ofo_safety::region::initial_state;
use ofo_safety::sensitivity::compute_sensitivity;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let grid = load_grid(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/four_bus_ring.json"))?;
    let (u0, _) = initial_state(&grid)?;
    let map = compute_sensitivity(&grid, &u0)?;
    let schedule = [SetPoint::new(0.45, 0.0), SetPoint::new(0.2, 0.25)];
    let cfg = ControllerConfig::new(0.11294);
    let traj = run_schedule(&grid, &u0, &map, &schedule, &cfg, &NoDisturbance)?;

    for step in traj.steps.iter().take(12) {
        let (p, q) = step.y.pcc();
        println!(
            "k={:<3} pcc=({p:8.5}, {q:8.5}) phi={:.3e} active=[{}]",
            step.k,
            step.phi,
            step.active_constraints.join(", ")
        );
    }
    for seg in &traj.segments {
        println!(
            "target ({:.3}, {:.3}): started k={}, final k={}, converged {}",
            seg.target.p, seg.target.q, seg.start, seg.final_index, seg.converged
        );
    }
    Ok(())
}
