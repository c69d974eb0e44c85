//! Finds the largest controller gain with monotone tracking cost toward
//! interior probes (halfway to each region vertex) and the working gain.
//!
//! ```not_rust
//! cargo run --release --example calibrate_gain -- fixtures/four_bus_ring.json
//! ```

use ofo_safety::controller::{calibrate_gain, SetPoint, GAIN_SAFETY_FACTOR};
use ofo_safety::grid::load_grid;
use ofo_safety::region::{initial_state, sweep_for, SweepOptions};
use ofo_safety::sensitivity::compute_sensitivity;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/four_bus_ring.json").into());
    let grid = load_grid(&path)?;
    let f = sweep_for(&grid, &SweepOptions::default())?;
    let (u0, _) = initial_state(&grid)?;
    let map = compute_sensitivity(&grid, &u0)?;
    let c = f.center;
    let probes: Vec<SetPoint> =
        f.vertices.iter().map(|v| SetPoint::new(c.0 + 0.5 * (v.0 - c.0), c.1 + 0.5 * (v.1 - c.1))).collect();
    let limit = calibrate_gain(&grid, &u0, &map, &probes, 500, (0.01, 2.0), 12)?;
    println!("descent limit {limit:.6}");
    println!("working gain  {:.6}", GAIN_SAFETY_FACTOR * limit);
    Ok(())
}
