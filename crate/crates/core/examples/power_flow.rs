//! Solves the AC power flow of a grid file and prints the measurement vector.
//!
//! ```not_rust
//! cargo run --example power_flow -- fixtures/four_bus_ring.json
//! ```

use ofo_safety::grid::load_grid;
use ofo_safety::power_flow::{measure, measurement_labels, nodal_residual, solve_power_flow};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/four_bus_ring.json").into());
    let grid = load_grid(&path)?;
    let state = solve_power_flow(&grid, None)?;
    println!("converged {} after {} iterations, mismatch {:.2e}", state.converged, state.iterations, state.mismatch);

    let worst = nodal_residual(&grid, &state);
    println!("largest nodal residual {worst:.2e} p.u.");

    let y = measure(&state, None).expect("converged state");
    for (label, value) in measurement_labels(&grid).iter().zip(&y.0) {
        println!("{label:>10} {value:10.6}");
    }
    Ok(())
}
